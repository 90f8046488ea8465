"""Versioned question and system-message templates for the dialogue protocol."""

TEMPLATE_VERSION = "q4-v1"

MODES = ("camouflage", "non_camouflage")
OUTLINE_POLICIES = ("silent", "mentioned", "none")

# Words that must never appear in prompts produced under the silent policy.
DEFAULT_BANNED_LEXICON = (
    "outline", "outlined", "contour", "highlighted", "annotation", "marked",
)

PROHIBITION_CLAUSE = (
    "Anything directly related to object outlines is forbidden: never mention "
    "the colored boundary, and avoid the words outline, outlined, contour, "
    "highlighted, annotation, or marked."
)

BASE_SYSTEM_MESSAGES = (
    "You are an expert observer of camouflaged animals and objects. Study how "
    "the subject's colors, textures, and shape relate to its surroundings.",
    "Answer only what is asked, in plain descriptive prose. Do not add "
    "greetings, disclaimers, lists, or commentary about the task itself.",
)

QUESTION_1 = (
    "Describe the object in this image: its kind, colors, surface texture, "
    "and posture."
)

QUESTION_2_CAMOUFLAGE = (
    "Describe the environment surrounding the object and how the object's "
    "appearance relates to it."
)

QUESTION_2_NON_CAMOUFLAGE = (
    "Now imagine an ideal scenery that might successfully camouflage the "
    "object, and describe that scenery and how the object would blend into it."
)

QUESTION_3 = (
    "Reorganize your descriptions into one detailed prompt for an image "
    "generator: a few sentences covering the object, the environment, and how "
    "they blend together."
)

QUESTION_4 = (
    "Review all contents and summarize each prompt into one sentence. Reply "
    "with exactly one sentence ending in a single period."
)

REASK_QUESTION_3 = (
    "Your detailed prompt used forbidden words: {words}. Rewrite the detailed "
    "prompt without any of them, describing only the natural scene."
)

REASK_QUESTION_4 = (
    "Summarize the detailed prompt again as exactly one sentence ending in a "
    "single period, avoiding the words: {words}."
)


def system_messages(policy: str) -> list[str]:
    msgs = list(BASE_SYSTEM_MESSAGES)
    if policy == "silent":
        msgs.append(PROHIBITION_CLAUSE)
    return msgs


def question_text(index: int, mode: str) -> str:
    if index == 0:
        return QUESTION_1
    if index == 1:
        return QUESTION_2_NON_CAMOUFLAGE if mode == "non_camouflage" \
            else QUESTION_2_CAMOUFLAGE
    if index == 2:
        return QUESTION_3
    if index == 3:
        return QUESTION_4
    raise IndexError(index)
