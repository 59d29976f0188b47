"""Run settings: TOML file + environment, with command-line flags on top."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from refverify.backends.base import Detector, Vlm
from refverify.backends.http import API_KEY_ENV, HttpDetector, OpenAICompatibleVlm
from refverify.backends.scripted import FixtureDetector, ScriptedVlm
from refverify.cache import CACHE_DIR_ENV
from refverify.errors import ConfigError
from refverify.pipeline import PipelineConfig, PromptSet

DETECTIONS_FILE = "detections.json"
VLM_SCRIPT_FILE = "vlm_script.json"


@dataclass
class Settings:
    vlm_base_url: str | None = None
    vlm_model_id: str = "gpt-4o"
    vlm_temperature: float = 0.0
    vlm_timeout: float = 60.0
    api_key: str | None = None
    detector_base_url: str | None = None
    detector_fixture_path: str | None = None
    fixtures_dir: str | None = None
    concurrency: int = 4
    retries: int = 2
    workers: int = 1
    cache_dir: str | None = None
    max_proposals: int = 12
    prompts: dict[str, str] = field(default_factory=dict)

    def pipeline_config(self) -> PipelineConfig:
        try:
            prompts = PromptSet(**self.prompts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad prompt override: {exc}") from exc
        return PipelineConfig(
            prompts=prompts,
            max_proposals=self.max_proposals,
            temperature=self.vlm_temperature,
            workers=self.workers,
        )


_FILE_KEYS = {
    ("vlm", "base_url"): "vlm_base_url",
    ("vlm", "model_id"): "vlm_model_id",
    ("vlm", "temperature"): "vlm_temperature",
    ("vlm", "timeout"): "vlm_timeout",
    ("detector", "base_url"): "detector_base_url",
    ("detector", "fixture_path"): "detector_fixture_path",
    ("pipeline", "max_proposals"): "max_proposals",
    ("pipeline", "workers"): "workers",
    (None, "concurrency"): "concurrency",
    (None, "retries"): "retries",
    (None, "workers"): "workers",
    (None, "cache_dir"): "cache_dir",
}


def _from_file(path: Path) -> dict[str, Any]:
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    out: dict[str, Any] = {}
    for (section, key), attr in _FILE_KEYS.items():
        table = data if section is None else data.get(section, {})
        if isinstance(table, dict) and key in table:
            out[attr] = table[key]
    if isinstance(data.get("prompts"), dict):
        out["prompts"] = dict(data["prompts"])
    # relative paths in the file are relative to the file
    for attr in ("detector_fixture_path", "cache_dir"):
        if attr in out and not Path(out[attr]).is_absolute():
            out[attr] = str(path.parent / out[attr])
    return out


def load_settings(
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] = os.environ,
) -> Settings:
    """Environment < config file < explicit overrides (None values are skipped)."""
    settings = Settings(api_key=environ.get(API_KEY_ENV) or None, cache_dir=environ.get(CACHE_DIR_ENV) or None)
    updates: dict[str, Any] = {}
    if config_path is not None:
        updates.update(_from_file(Path(config_path)))
    updates.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(Settings)}
    unknown = set(updates) - known
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(sorted(unknown))}")
    settings = replace(settings, **updates)
    if settings.concurrency < 1 or settings.workers < 1 or settings.retries < 0 or settings.max_proposals < 1:
        raise ConfigError("concurrency, workers and max_proposals must be >= 1; retries >= 0")
    return settings


def build_backends(settings: Settings) -> tuple[Detector, Vlm]:
    if settings.fixtures_dir is not None:
        root = Path(settings.fixtures_dir)
        det_path, script_path = root / DETECTIONS_FILE, root / VLM_SCRIPT_FILE
        for p in (det_path, script_path):
            if not p.is_file():
                raise ConfigError(f"fixtures directory lacks {p.name}: {root}")
        try:
            vlm = ScriptedVlm.from_file(script_path, model_id=settings.vlm_model_id)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {script_path}: {exc}") from exc
        return FixtureDetector.from_file(det_path), vlm

    common = {"timeout": settings.vlm_timeout, "retries": settings.retries, "max_concurrency": settings.concurrency}
    if settings.detector_fixture_path:
        detector: Detector = FixtureDetector.from_file(settings.detector_fixture_path)
    elif settings.detector_base_url:
        detector = HttpDetector(settings.detector_base_url, **common)
    else:
        raise ConfigError("no detector configured (detector.base_url, detector.fixture_path or --fixtures)")
    if not settings.vlm_base_url:
        raise ConfigError("no VLM configured (vlm.base_url or --fixtures)")
    vlm = OpenAICompatibleVlm(settings.vlm_base_url, settings.vlm_model_id, settings.api_key, **common)
    return detector, vlm
