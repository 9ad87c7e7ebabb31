"""Procedural (layout, grounded text, caption, image) scenes with coherence probes.

Scenes contain a background plus up to three shapes (ball, paddle, block).
Two knobs make the coherence claims testable with geometry instead of FID:

* adjacency: the ball either rests on the paddle ("touching", at least one
  4-adjacent ball/paddle pixel pair) or floats above it ("apart", none);
* attribute: the caption says "bright" or "dark", which scales every region
  colour by 1.0 or 0.4.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from coherdiff.errors import GenerationError, ParameterError, VocabularyError

CLASSES = ("background", "ball", "paddle", "block")
BACKGROUND, BALL, PADDLE, BLOCK = range(4)

VOCAB = (
    "<pad>", "<null>", "background", "ball", "paddle", "block",
    "bright", "dark", "a", "the", "on", "touching", "above", "apart",
    "from", "and", "with", "near", "red", "green", "yellow", "blue",
    "scene", "small", "large", "left", "right", "of", "is", "resting",
    "floating", "sky",
)
PAD, NULL = 0, 1

# min per-channel L-inf distance between any two colours is 0.55 (bright) / 0.22 (dark)
PALETTE = np.array([
    [0.25, 0.35, 0.80],  # background
    [0.95, 0.20, 0.15],  # ball
    [0.20, 0.90, 0.30],  # paddle
    [0.95, 0.85, 0.20],  # block
])
LUMINANCE = {"bright": 1.0, "dark": 0.4}
NOISE_SIGMA = 0.02
MIN_SCENE_SIZE = 24
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class Vocabulary:
    """Stable word <-> id mapping over a closed word list."""

    def __init__(self, words=VOCAB):
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, words):
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise VocabularyError(f"unknown word {exc.args[0]!r}") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.words):
                raise VocabularyError(f"unknown token id {i}")
            out.append(self.words[int(i)])
        return out

    def class_tokens(self):
        return [self.index[c] for c in CLASSES]


DEFAULT_VOCAB = Vocabulary()


def tokenize(words, vocab=DEFAULT_VOCAB):
    return vocab.encode(words)


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple = ("ball", "paddle", "block")
    adjacency: str = "touching"
    attribute: str = "bright"
    size: int = 32

    def __post_init__(self):
        unknown = set(self.shapes) - set(CLASSES[1:])
        if unknown:
            raise ParameterError(f"unknown shapes {sorted(unknown)}")
        if self.adjacency not in ("touching", "apart"):
            raise ParameterError(f"adjacency must be 'touching' or 'apart', got {self.adjacency!r}")
        if self.attribute not in LUMINANCE:
            raise ParameterError(f"attribute must be one of {sorted(LUMINANCE)}, got {self.attribute!r}")
        if self.size < MIN_SCENE_SIZE:
            raise ParameterError(f"scenes need at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE} pixels, got {self.size}")

    @classmethod
    def from_variant(cls, variant, **kw):
        """Parse ``"touching"``, ``"apart/dark"`` and similar mix keys."""
        parts = variant.split("/")
        opts = dict(kw)
        for p in parts:
            if p in ("touching", "apart"):
                opts["adjacency"] = p
            elif p in LUMINANCE:
                opts["attribute"] = p
            else:
                raise ParameterError(f"unknown variant component {p!r}")
        return cls(**opts)


@dataclass
class Scene:
    layout: np.ndarray
    grounded_ids: list
    caption_ids: list
    image: np.ndarray
    seed: int
    spec: SceneSpec = field(default_factory=SceneSpec)

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.seed == other.seed and self.spec == other.spec
                and self.grounded_ids == other.grounded_ids and self.caption_ids == other.caption_ids
                and np.array_equal(self.layout, other.layout) and np.array_equal(self.image, other.image))


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect(size, top, left, h, w):
    m = np.zeros((size, size), dtype=bool)
    m[top:top + h, left:left + w] = True
    return m


def _dilate(mask, steps):
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def adjacent_pairs(layout, a, b):
    """Number of 4-adjacent pixel pairs labelled ``(a, b)`` in either order."""
    layout = np.asarray(layout)
    horiz = (layout[:, :-1] == a) & (layout[:, 1:] == b) | (layout[:, :-1] == b) & (layout[:, 1:] == a)
    vert = (layout[:-1] == a) & (layout[1:] == b) | (layout[:-1] == b) & (layout[1:] == a)
    return int(horiz.sum() + vert.sum())


def contact_band(layout, a=BALL, b=PADDLE, width=2):
    """Pixels within ``width`` 4-steps of an ``(a, b)`` contact pixel.

    A contact pixel is labelled ``a`` or ``b`` and 4-adjacent to the other
    label. Empty when the two regions do not touch.
    """
    layout = np.asarray(layout)
    is_a, is_b = layout == a, layout == b
    contact = (is_a & _dilate(is_b, 1)) | (is_b & _dilate(is_a, 1))
    return _dilate(contact, width)


def _place(rng, spec):
    size = spec.size
    layout = np.zeros((size, size), dtype=np.int64)
    want = set(spec.shapes)
    taken = np.zeros((size, size), dtype=bool)
    if "paddle" in want:
        pw, ph = int(rng.integers(10, 15)), 3
        top = int(rng.integers(size // 2 + 2, size - ph - 1))
        left = int(rng.integers(1, size - pw - 1))
        paddle = _rect(size, top, left, ph, pw)
        layout[paddle] = PADDLE
        taken |= paddle
    if "ball" in want:
        r = int(rng.integers(3, 5))
        if "paddle" in want:
            cx = int(rng.integers(left + 1, left + pw - 1))
            gap = 0 if spec.adjacency == "touching" else int(rng.integers(3, 6))
            cy = top - 1 - gap - r
        else:
            cx = int(rng.integers(r + 1, size - r - 1))
            cy = int(rng.integers(r + 1, size // 2))
        if cy - r < 0:
            raise GenerationError("ball does not fit above the paddle")
        ball = _disk(size, cy, cx, r) & ~taken
        layout[ball] = BALL
        taken |= ball
    if "block" in want:
        exclusion = _dilate(taken, 2)
        for _ in range(200):
            side = int(rng.integers(5, 8))
            top_b = int(rng.integers(0, size - side + 1))
            left_b = int(rng.integers(0, size - side + 1))
            block = _rect(size, top_b, left_b, side, side)
            if not (block & exclusion).any():
                layout[block] = BLOCK
                break
        else:
            raise GenerationError("no room for the block")
    return layout


def _caption(spec):
    words = ["a", spec.attribute]
    if "ball" in spec.shapes and "paddle" in spec.shapes:
        words += ["ball", "touching" if spec.adjacency == "touching" else "above", "paddle"]
    else:
        words += [s for s in ("ball", "paddle") if s in spec.shapes] or ["scene"]
    if "block" in spec.shapes:
        words += ["and", "block"]
    return words


def render(layout, attribute, rng):
    base = PALETTE[layout] * LUMINANCE[attribute]
    # truncated at 4 sigma so every pixel provably stays within the 5 sigma band
    noise = np.clip(rng.standard_normal(base.shape), -4.0, 4.0)
    noisy = base + NOISE_SIGMA * noise
    return np.ascontiguousarray(noisy.transpose(2, 0, 1))


def gen_scene(seed, spec=SceneSpec(), vocab=DEFAULT_VOCAB):
    """Deterministic scene for ``seed``; image is ``3 x H x W`` in ``[0, 1]`` (before noise)."""
    rng = np.random.default_rng(seed)
    layout = _place(rng, spec)
    if spec.adjacency == "touching" and {"ball", "paddle"} <= set(spec.shapes):
        if adjacent_pairs(layout, BALL, PADDLE) == 0:
            raise GenerationError("touching scene produced no ball/paddle contact")
    present = sorted(set(np.unique(layout).tolist()))
    grounded = vocab.encode([CLASSES[c] for c in present])
    caption = vocab.encode(_caption(spec))
    image = render(layout, spec.attribute, rng)
    return Scene(layout, grounded, caption, image, int(seed), spec)


def downsample_scene(scene, size, vocab=DEFAULT_VOCAB):
    """Nearest-neighbour copy of ``scene`` at ``size x size``; grounded words follow the classes kept."""
    if size == scene.layout.shape[0]:
        return scene
    idx = np.arange(size) * scene.layout.shape[0] // size
    layout = scene.layout[np.ix_(idx, idx)]
    grounded = vocab.encode([CLASSES[c] for c in np.unique(layout)])
    return Scene(layout, grounded, list(scene.caption_ids), scene.image[:, idx][:, :, idx], scene.seed, scene.spec)


def derive_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _allocate(mix, n):
    """Largest-remainder counts for each variant; sums to ``n``."""
    names = list(mix)
    weights = np.array([float(mix[k]) for k in names])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ParameterError(f"invalid mix {mix}")
    exact = weights / weights.sum() * n
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return dict(zip(names, counts.tolist()))


DEFAULT_MIX = {"touching/bright": 0.25, "touching/dark": 0.25, "apart/bright": 0.25, "apart/dark": 0.25}


def dataset_stream(seed, n, spec_mix=None, size=32, vocab=DEFAULT_VOCAB):
    """``n`` reproducible scenes whose variants follow ``spec_mix`` proportions.

    Item ``i`` is ``gen_scene(derive_seed(seed, i), ...)``; variant
    assignment is a seeded shuffle of the largest-remainder allocation.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    mix = DEFAULT_MIX if spec_mix is None else spec_mix
    counts = _allocate(mix, n)
    variants = [name for name, c in counts.items() for _ in range(c)]
    np.random.default_rng([int(seed), n]).shuffle(variants)
    for i, variant in enumerate(variants):
        spec = SceneSpec.from_variant(variant, size=size)
        yield gen_scene(derive_seed(seed, i), spec, vocab)


def luminance(image):
    """Mean Rec.601 luma of a ``3 x H x W`` image."""
    return float(np.tensordot(LUMA_WEIGHTS, np.asarray(image), axes=1).mean())


def nearest_palette(image, attribute=None):
    """Per-pixel class of the nearest attribute-scaled palette colour.

    With ``attribute=None`` every luminance variant competes, so only the
    hue decides the class and brightness is ignored.
    """
    scales = list(LUMINANCE.values()) if attribute is None else [LUMINANCE[attribute]]
    colours = np.concatenate([PALETTE * s for s in scales])
    pix = np.asarray(image).transpose(1, 2, 0)[..., None, :]
    return np.argmin(((pix - colours) ** 2).sum(-1), axis=-1) % len(PALETTE)


def palette_agreement(image, layout, attribute=None):
    """Fraction of pixels whose nearest palette class matches ``layout``.

    Returns ``(overall, {class_name: fraction})`` over the classes present.
    """
    layout = np.asarray(layout)
    hit = nearest_palette(image, attribute) == layout
    per_class = {CLASSES[c]: float(hit[layout == c].mean()) for c in np.unique(layout)}
    return float(hit.mean()), per_class


# -- on-disk dump ---------------------------------------------------------------

def write_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ParameterError("PGM labels must lie in [0, 255]")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ParameterError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ParameterError(f"{path}: 16-bit PGM not supported")
    body = parts[4]
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).astype(np.int64)


def to_uint8(image):
    """``3 x H x W`` floats in ``[0, 1]`` -> ``H x W x 3`` bytes (round half to even)."""
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)


def write_png(path, image):
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def write_gray_png(path, values):
    """``H x W`` floats in ``[0, 1]`` -> 8-bit grayscale PNG (0 -> 0, 1 -> 255)."""
    from PIL import Image

    pixels = np.clip(np.rint(np.asarray(values) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path):
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def dump_scene(scene, directory, vocab=DEFAULT_VOCAB):
    os.makedirs(directory, exist_ok=True)
    write_png(os.path.join(directory, "image.png"), scene.image)
    write_pgm(os.path.join(directory, "layout.pgm"), scene.layout)
    tokens = {
        "seed": scene.seed,
        "adjacency": scene.spec.adjacency,
        "attribute": scene.spec.attribute,
        "shapes": list(scene.spec.shapes),
        "grounded": vocab.decode(scene.grounded_ids),
        "grounded_ids": list(scene.grounded_ids),
        "caption": vocab.decode(scene.caption_ids),
        "caption_ids": list(scene.caption_ids),
    }
    with open(os.path.join(directory, "tokens.json"), "w") as fh:
        json.dump(tokens, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dump_dataset(scenes, out_dir, vocab=DEFAULT_VOCAB):
    """Write one ``scene_NNNNN`` directory per scene plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}"
        dump_scene(scene, os.path.join(out_dir, name), vocab)
        names.append({"name": name, "seed": scene.seed,
                      "variant": f"{scene.spec.adjacency}/{scene.spec.attribute}"})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"count": len(names), "scenes": names}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return names


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    scenes = []
    for entry in manifest["scenes"]:
        d = os.path.join(data_dir, entry["name"])
        with open(os.path.join(d, "tokens.json")) as fh:
            tokens = json.load(fh)
        layout = read_pgm(os.path.join(d, "layout.pgm"))
        spec = SceneSpec(tuple(tokens["shapes"]), tokens["adjacency"], tokens["attribute"], layout.shape[0])
        scenes.append(Scene(layout, tokens["grounded_ids"], tokens["caption_ids"],
                            read_png(os.path.join(d, "image.png")), tokens["seed"], spec))
    return scenes
