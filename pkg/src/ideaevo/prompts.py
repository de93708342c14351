"""Prompt assets: one ``$placeholder`` text template per role and per task."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template

from .errors import ConfigError


@lru_cache(maxsize=None)
def _read(name: str, template_dir: str | None) -> str:
    if template_dir is not None:
        path = Path(template_dir) / f"{name}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
    res = resources.files("ideaevo") / "templates" / f"{name}.txt"
    if not res.is_file():
        raise ConfigError(f"missing prompt template {name!r}")
    return res.read_text(encoding="utf-8")


def render(name: str, template_dir: str | Path | None = None, **values) -> str:
    """Render template ``name``; files in ``template_dir`` override the bundled ones."""
    text = _read(name, str(template_dir) if template_dir is not None else None)
    try:
        return Template(text).substitute({k: str(v) for k, v in values.items()}).strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"template {name!r} needs value for {exc}") from exc


def bullet_list(items, empty: str = "(none)") -> str:
    items = [str(i) for i in items]
    return "\n".join(f"- {i}" for i in items) if items else empty
