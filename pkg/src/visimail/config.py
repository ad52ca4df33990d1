"""Pipeline configuration: one INI-style file, env overrides, ``--set`` overrides.

Precedence, lowest first: built-in defaults, the config file, environment
variables named ``VISIMAIL__<SECTION>__<KEY>``, then explicit overrides.

Banner rules live in ``[mailparse] banner_rules`` as a multi-line value, one
``selector <css>`` or ``regex <pattern>`` rule per line.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from lxml.cssselect import CSSSelector

from .cluster import DEFAULT_TAU
from .embed import EmbedBackendConfig
from .errors import ConfigError
from .imgproc import PreprocessConfig
from .mailparse import BannerPatternSet
from .render import RendererConfig

ENV_PREFIX = "VISIMAIL__"


@dataclass(frozen=True)
class IndexConfig:
    kind: str = "hnsw"
    dim: int = 256
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("flat", "hnsw"):
            raise ConfigError(f"index.kind must be flat or hnsw, not {self.kind!r}")
        if self.M < 2 or self.ef_construction < 1 or self.ef_search < 1:
            raise ConfigError("index.M must be >= 2 and ef values >= 1")


@dataclass(frozen=True)
class ClusterConfig:
    tau: float = DEFAULT_TAU

    def validate(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("cluster.tau must lie in (0, 1]")


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    data_dir: str = "visimail-data"
    process_cap: int = 4
    workers: int = 4

    def validate(self) -> None:
        if not 0 < self.port < 65536:
            raise ConfigError("service.port must be within 1..65535")
        if self.process_cap < 1 or self.workers < 1:
            raise ConfigError("service.process_cap and service.workers must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    banners: BannerPatternSet = field(default_factory=BannerPatternSet.default)
    render: RendererConfig = field(default_factory=RendererConfig)
    imgproc: PreprocessConfig = field(default_factory=PreprocessConfig)
    embed: EmbedBackendConfig = field(default_factory=EmbedBackendConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def validate(self, check_paths: bool = True, check_render: bool = True) -> "PipelineConfig":
        if check_render:
            self.render.validate(check_paths)
        self.imgproc.validate()
        self.embed.validate()
        self.index.validate()
        self.cluster.validate()
        self.service.validate()
        if self.embed.dim != self.index.dim:
            raise ConfigError(f"embed.dim ({self.embed.dim}) != index.dim ({self.index.dim})")
        for rule in self.banners.patterns:
            try:
                _check_rule(rule)
            except Exception as exc:
                raise ConfigError(f"bad banner rule {rule.kind} {rule.scope!r}: {exc}") from exc
        return self

    def to_ini(self) -> str:
        lines = ["[mailparse]", "banner_rules ="]
        lines += [f"    {rule}" for rule in self.banners.to_lines()]
        for section in _SECTIONS:
            obj = getattr(self, section)
            lines += ["", f"[{section}]"]
            lines += [f"{f.name} = {getattr(obj, f.name)}" for f in dataclasses.fields(obj)]
        return "\n".join(lines) + "\n"


_SECTIONS = ("render", "imgproc", "embed", "index", "cluster", "service")


def _check_rule(rule) -> None:
    if rule.kind == "regex":
        re.compile(rule.scope)
    else:
        CSSSelector(rule.scope, translator="html")


def _coerce(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _apply(cfg: PipelineConfig, section: str, key: str, raw: str) -> PipelineConfig:
    section, key = section.strip().lower(), key.strip()
    if section == "mailparse":
        if key != "banner_rules":
            raise ConfigError(f"unknown option mailparse.{key}")
        try:
            return dataclasses.replace(cfg, banners=BannerPatternSet.from_lines(raw.splitlines()))
        except ValueError as exc:
            raise ConfigError(f"mailparse.banner_rules: {exc}") from exc
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    current = getattr(cfg, section)
    names = {f.name.lower(): f.name for f in dataclasses.fields(current)}
    name = names.get(key.lower())
    if name is None:
        raise ConfigError(f"unknown option {section}.{key}")
    value = _coerce(section, name, raw, getattr(current, name))
    return dataclasses.replace(cfg, **{section: dataclasses.replace(current, **{name: value})})


def parse_override(text: str) -> tuple[str, str, str]:
    """``"section.key=value"`` -> (section, key, value)."""
    lhs, sep, value = text.partition("=")
    section, dot, key = lhs.partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    return section, key, value


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = (),
                env: Mapping[str, str] | None = None, check_paths: bool = True,
                check_render: bool = True) -> PipelineConfig:
    """Build a validated config. ``check_render=False`` suits verbs that never render."""
    cfg = PipelineConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg = _apply(cfg, section, key, value)
    env = os.environ if env is None else env
    for name in sorted(env):
        if name.startswith(ENV_PREFIX):
            section, sep, key = name[len(ENV_PREFIX):].partition("__")
            if not sep:
                raise ConfigError(f"environment override {name} needs SECTION__KEY")
            cfg = _apply(cfg, section, key, env[name])
    for item in overrides:
        cfg = _apply(cfg, *parse_override(item))
    return cfg.validate(check_paths, check_render)
