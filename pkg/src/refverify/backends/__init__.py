"""Detector and VLM backends: live HTTP, scripted fixtures, synthetic oracle."""

from refverify.backends.base import (
    NONE_CHOICE,
    Choice,
    Detector,
    Proposal,
    Vlm,
    VlmReply,
    VlmRequest,
    format_truefalse,
    parse_index,
    parse_truefalse,
    request_key,
)
from refverify.backends.http import HttpDetector, OpenAICompatibleVlm
from refverify.backends.scripted import FixtureDetector, Rule, ScriptedVlm
from refverify.backends.synthetic import (
    Scene,
    SyntheticOracleParams,
    SyntheticVlm,
    SyntheticWorld,
    synthetic_select,
    synthetic_verify,
)

__all__ = [
    "NONE_CHOICE",
    "Choice",
    "Detector",
    "FixtureDetector",
    "HttpDetector",
    "OpenAICompatibleVlm",
    "Proposal",
    "Rule",
    "Scene",
    "ScriptedVlm",
    "SyntheticOracleParams",
    "SyntheticVlm",
    "SyntheticWorld",
    "Vlm",
    "VlmReply",
    "VlmRequest",
    "format_truefalse",
    "parse_index",
    "parse_truefalse",
    "request_key",
    "synthetic_select",
    "synthetic_verify",
]
