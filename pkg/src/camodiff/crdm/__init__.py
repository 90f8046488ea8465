"""Dialogue-based prompt annotation: outlines, protocol, and the mock endpoint."""

from .dialogue import (DialogueTranscript, DialogueTurn, PromptPair, VlmEndpoint,
                       annotate_corpus, extract_prompts, read_prompt_pairs,
                       run_dialogue, scan_lexicon, write_prompt_pairs)
from .outline import annotate_outline, boundary_band
from .templates import (DEFAULT_BANNED_LEXICON, MODES, OUTLINE_POLICIES,
                        PROHIBITION_CLAUSE)

__all__ = [
    "DEFAULT_BANNED_LEXICON", "DialogueTranscript", "DialogueTurn", "MODES",
    "OUTLINE_POLICIES", "PROHIBITION_CLAUSE", "PromptPair", "VlmEndpoint",
    "annotate_corpus", "annotate_outline", "boundary_band", "extract_prompts",
    "read_prompt_pairs", "run_dialogue", "scan_lexicon", "write_prompt_pairs",
]
