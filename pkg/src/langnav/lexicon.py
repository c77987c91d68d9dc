"""Word lists shared by the world catalog, the instruction grammar and the renderer.

Kinds, colors and sizes are closed enums: scenario validation rejects anything
outside these lists, which keeps the glyph table and the French lexicon total.
"""

SIZES = ("small", "medium", "large")
SIZE_ORDER = {"small": 0, "medium": 1, "large": 2}

# Background is black, obstacles gray, the agent white; object colors must
# avoid all three so every glyph stays visible against every tile.
COLORS = ("blue", "green", "orange", "purple", "red", "yellow")

COLOR_RGB = {
    "blue": (60, 90, 230),
    "green": (50, 200, 70),
    "orange": (240, 150, 30),
    "purple": (170, 60, 220),
    "red": (220, 40, 40),
    "yellow": (230, 220, 50),
}

# 21 kinds x 3 allowed colors each = 63 catalog entries.
KIND_COLORS = {
    "apple": ("green", "red", "yellow"),
    "bag": ("blue", "purple", "red"),
    "ball": ("orange", "purple", "red"),
    "banana": ("green", "purple", "yellow"),
    "bear": ("orange", "purple", "red"),
    "bed": ("blue", "green", "purple"),
    "book": ("blue", "orange", "red"),
    "bus": ("blue", "red", "yellow"),
    "car": ("blue", "green", "red"),
    "cat": ("orange", "purple", "yellow"),
    "chair": ("blue", "green", "orange"),
    "cup": ("green", "purple", "yellow"),
    "dog": ("green", "orange", "yellow"),
    "flower": ("orange", "red", "yellow"),
    "house": ("blue", "red", "yellow"),
    "lamp": ("green", "orange", "purple"),
    "phone": ("blue", "green", "red"),
    "sofa": ("blue", "green", "red"),
    "table": ("blue", "orange", "purple"),
    "television": ("blue", "orange", "purple"),
    "tree": ("green", "orange", "purple"),
}

KINDS = tuple(sorted(KIND_COLORS))

FR_KINDS = {
    "apple": "pomme",
    "bag": "sac",
    "ball": "balle",
    "banana": "banane",
    "bear": "ours",
    "bed": "lit",
    "book": "livre",
    "bus": "bus",
    "car": "voiture",
    "cat": "chat",
    "chair": "chaise",
    "cup": "tasse",
    "dog": "chien",
    "flower": "fleur",
    "house": "maison",
    "lamp": "lampe",
    "phone": "telephone",
    "sofa": "sofa",
    "table": "table",
    "television": "television",
    "tree": "arbre",
}

FR_COLORS = {
    "blue": "bleu",
    "green": "vert",
    "orange": "orange",
    "purple": "violet",
    "red": "rouge",
    "yellow": "jaune",
}

FR_SIZES = {
    "small": "petite",
    "medium": "moyenne",
    "large": "grande",
}
