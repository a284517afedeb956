"""Deterministic stand-ins for the heavyweight pretrained backends.

Every stub is seeded from the experiment seed via named streams, is pure
given its construction arguments, and declares itself stateless so callers
may share one instance across threads. Real backends plug in behind the
same call signatures; `resolve_t2v_backend` picks one by name or via the
NEURONS_T2V_BACKEND environment variable.
"""

from __future__ import annotations

import hashlib
import importlib
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .errors import BackendError, ShapeError
from .rng import numpy_stream
from .text import CaptionTokenizer, MOVING_VERBS, STATIC_VERB

ENV_T2V = "NEURONS_T2V_BACKEND"


def orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Seeded matrix with orthonormal columns (rows >= cols) via QR."""
    if rows < cols:
        raise ValueError(f"need rows >= cols, got {rows} x {cols}")
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign ambiguity so the result is unique for a given stream
    return (q * np.sign(np.diag(r))[None, :]).astype(np.float64)


def _pool2d(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Block-mean pooling of [..., H, W] down to [..., out_h, out_w]."""
    *lead, h, w = img.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"cannot pool {h}x{w} to {out_h}x{out_w} evenly")
    fh, fw = h // out_h, w // out_w
    blocks = img.reshape(*lead, out_h, fh, out_w, fw)
    return blocks.mean(axis=(-3, -1))


class FrozenEncoderStub:
    """Frozen vision/text encoder stand-in.

    Frames embed as per-token patch statistics pushed through a fixed
    orthonormal projection plus a token position code; text embeds via a
    seeded id-embedding table. All outputs are unit-normalized along the
    channel axis.
    """

    stateless = True
    _PATCH = 2  # 2x2 pooled cells per token patch

    def __init__(self, tokens: int, channels: int, text_tokens: int,
                 height: int, width: int, seed: int, vocab_size: int = 512):
        self.tokens = tokens
        self.channels = channels
        self.text_tokens = text_tokens
        self.height = height
        self.width = width
        grid = int(round(tokens ** 0.5))
        if grid * grid != tokens:
            raise ShapeError(f"tokens must be square, got {tokens}")
        self.grid = grid
        feat = 3 * self._PATCH * self._PATCH
        rng = numpy_stream(seed, "frozen.video")
        self._frame_proj = orthonormal_columns(rng, channels, feat)  # [C, feat]
        self._token_pos = 0.1 * rng.standard_normal((tokens, channels))
        self.tokenizer = CaptionTokenizer.default(vocab_size)
        trng = numpy_stream(seed, "frozen.text")
        self._word_table = trng.standard_normal((self.tokenizer.vocab_size, channels))
        self._text_pos = 0.1 * trng.standard_normal((text_tokens, channels))

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "FrozenEncoderStub":
        m, d = config.model, config.data
        return cls(m.tokens, m.channels, m.text_tokens, d.height, d.width, config.seed,
                   vocab_size=m.vocab_size)

    @staticmethod
    def _normalize(e: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
        return (e / np.maximum(norm, 1e-12)).astype(np.float32)

    def frame_embed(self, frame: np.ndarray) -> np.ndarray:
        """[3, H, W] -> [N, C], unit-normalized per token."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (3, self.height, self.width):
            raise ShapeError(f"expected frame (3, {self.height}, {self.width}), "
                             f"got {frame.shape}")
        cells = self._pool_cells(frame)  # [N, feat]
        return self._normalize(cells @ self._frame_proj.T + self._token_pos)

    def _pool_cells(self, frame: np.ndarray) -> np.ndarray:
        g, p = self.grid, self._PATCH
        pooled = _pool2d(frame, g * p, g * p)  # [3, g*p, g*p]
        patches = pooled.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4)
        return patches.reshape(self.tokens, 3 * p * p)

    def video_embed(self, frames: np.ndarray) -> np.ndarray:
        """[F, 3, H, W] -> [F, N, C]."""
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected [F, 3, H, W], got {frames.shape}")
        return np.stack([self.frame_embed(f) for f in frames])

    def text_embed(self, text: str) -> np.ndarray:
        """Caption or concept name -> [N_t, C], unit-normalized per token."""
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        ids = self.tokenizer.encode(text)[:self.text_tokens]
        ids = ids + [CaptionTokenizer.PAD] * (self.text_tokens - len(ids))
        return self._normalize(self._word_table[np.asarray(ids)] + self._text_pos)


class LatentCoderStub:
    """Latent-space coder stand-in: 8x spatial reduction, seeded channel map.

    encode: [F, 3, H, W] -> [F, C_l, H/8, W/8] via block-mean pool then a
    fixed full-rank channel mix. decode inverts the mix (pseudo-inverse)
    and nearest-upsamples, producing the blurry video.
    """

    stateless = True
    FACTOR = 8

    def __init__(self, latent_channels: int, seed: int):
        if latent_channels < 3:
            raise ValueError("latent_channels must be >= 3 to keep color invertible")
        rng = numpy_stream(seed, "latent.coder")
        self._mix = orthonormal_columns(rng, latent_channels, 3)  # [C_l, 3]
        self._unmix = np.linalg.pinv(self._mix)  # [3, C_l]
        self.latent_channels = latent_channels

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "LatentCoderStub":
        return cls(config.model.latent_channels, config.seed)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected [F, 3, H, W], got {frames.shape}")
        f, _, h, w = frames.shape
        pooled = _pool2d(frames, h // self.FACTOR, w // self.FACTOR)
        latents = np.einsum("lc,fchw->flhw", self._mix, pooled)
        return latents.astype(np.float32)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise ShapeError(f"expected [F, {self.latent_channels}, h, w], got {latents.shape}")
        rgb = np.einsum("cl,flhw->fchw", self._unmix, latents)
        up = rgb.repeat(self.FACTOR, axis=2).repeat(self.FACTOR, axis=3)
        return np.clip(up, 0.0, 1.0).astype(np.float32)


class UnclipStub:
    """Keyframe-to-control-image generator stand-in: a 3x3 box blur.

    Depends only on the keyframe it is handed, so the control image is
    invariant to every other frame by construction.
    """

    stateless = True

    def generate(self, keyframe: np.ndarray) -> np.ndarray:
        """[3, H, W] in [0,1] -> control image [H, W, 3] in [0,1]."""
        frame = np.asarray(keyframe, dtype=np.float64)
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W], got {frame.shape}")
        padded = np.pad(frame, ((0, 0), (1, 1), (1, 1)), mode="edge")
        out = np.zeros_like(frame)
        for dy in range(3):
            for dx in range(3):
                out += padded[:, dy:dy + frame.shape[1], dx:dx + frame.shape[2]]
        out /= 9.0
        return np.clip(out, 0.0, 1.0).transpose(1, 2, 0).astype(np.float32)


class T2VStub:
    """Text-to-video generator stand-in.

    Resamples the conditioned blurry video to the requested frame count,
    blends each frame toward the control image, and adds seeded noise
    keyed on (seed, prompt). Deterministic under a fixed seed.
    """

    stateless = True

    def __init__(self, control_blend: float = 0.3, noise_scale: float = 0.02):
        if not 0.0 <= control_blend <= 1.0:
            raise ValueError("control_blend must be in [0, 1]")
        self.control_blend = control_blend
        self.noise_scale = noise_scale

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "T2VStub":
        return cls(config.infer.control_blend, config.infer.noise_scale)

    def generate(self, prompt: str, control_image: np.ndarray, blurry_video: np.ndarray,
                 num_frames: int, seed: int) -> np.ndarray:
        from .aggregator import interpolate_fps

        if not prompt:
            raise BackendError("prompt must be non-empty")
        video = np.asarray(blurry_video, dtype=np.float64)
        control = np.asarray(control_image, dtype=np.float64)
        if control.ndim != 3 or control.shape[2] != 3:
            raise ShapeError(f"control image must be [H, W, 3], got {control.shape}")
        if video.ndim != 4 or video.shape[1] != 3:
            raise ShapeError(f"blurry video must be [F, 3, H, W], got {video.shape}")
        resampled = interpolate_fps(video, num_frames=num_frames)
        chw = control.transpose(2, 0, 1)[None]
        blended = (1.0 - self.control_blend) * resampled + self.control_blend * chw
        prompt_key = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:4], "little")
        rng = numpy_stream(seed, "t2v.noise", prompt_key)
        noisy = blended + self.noise_scale * rng.standard_normal(blended.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def resolve_t2v_backend(name: str, config: ExperimentConfig):
    """Pick the video generator: 'stub', or 'module:factory' for external.

    The NEURONS_T2V_BACKEND environment variable overrides `name`.
    """
    choice = os.environ.get(ENV_T2V, "").strip() or name
    if choice == "stub":
        return T2VStub.from_config(config)
    if choice == "external":
        raise BackendError(
            f"backend 'external' needs {ENV_T2V}=module.path:factory in the environment")
    if ":" in choice:
        mod_name, _, attr = choice.partition(":")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise BackendError(f"cannot load backend '{choice}': {exc}") from exc
        backend = factory(config)
        if not hasattr(backend, "generate"):
            raise BackendError(f"backend '{choice}' lacks a generate() method")
        return backend
    raise BackendError(f"unknown backend '{choice}' (use 'stub' or 'module.path:factory')")


class ClassifierStub:
    """Video/image classifier stand-in: pooled pixels through a fixed
    seeded projection, softmax to a probability vector."""

    stateless = True
    _POOL = 8

    def __init__(self, num_labels: int, seed: int, temperature: float = 0.1):
        self.num_labels = num_labels
        rng = numpy_stream(seed, "classifier")
        feat = 3 * self._POOL * self._POOL
        self._proj = rng.standard_normal((num_labels, feat)) / np.sqrt(feat)
        self.temperature = temperature

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "ClassifierStub":
        return cls(config.eval.num_labels, config.seed)

    def class_probs(self, video: np.ndarray) -> np.ndarray:
        """[F, 3, H, W] video or [3, H, W] image -> [num_labels] probabilities."""
        arr = np.asarray(video, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError(f"expected [F, 3, H, W] or [3, H, W], got {np.asarray(video).shape}")
        mean_frame = arr.mean(axis=0)
        feats = _pool2d(mean_frame, self._POOL, self._POOL).reshape(-1)
        logits = (self._proj @ feats) / self.temperature
        logits -= logits.max()
        expl = np.exp(logits)
        return expl / expl.sum()


# ---------------------------------------------------------------------------
# text tools for verb accuracy

_VOWELS = frozenset("aeiou")

_EXTRA_VERB_STEMS = ("run", "walk", "fly", "swim", "jump", "float", "spin",
                     "roll", "fall", "rise", "turn", "stand", "sit", "go")


def _ends_cvc(w: str) -> bool:
    if len(w) < 3:
        return False
    c1, v, c2 = w[-3], w[-2], w[-1]
    return c1 not in _VOWELS and v in _VOWELS and c2 not in _VOWELS and c2 not in "wxy"


def stem_word(word: str) -> str:
    """Light suffix stripper: handles -ing/-ed (with doubled-consonant and
    silent-e repair) and plural -s/-es/-ies."""
    w = word.lower().strip()
    for suf in ("ing", "ed"):
        if w.endswith(suf) and len(w) - len(suf) >= 3:
            w = w[:-len(suf)]
            if len(w) >= 2 and w[-1] == w[-2] and w[-1] not in _VOWELS and w[-1] not in "lsz":
                return w[:-1]
            if _ends_cvc(w):
                return w + "e"
            return w
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    if w.endswith("es") and len(w) > 3 and w[-3] in "sxz":
        return w[:-2]
    if w.endswith("s") and not w.endswith("ss") and len(w) > 3:
        return w[:-1]
    return w


@dataclass(frozen=True)
class LexiconPosTagger:
    """Verb finder over a fixed stem lexicon (no statistical model)."""

    extra_stems: tuple[str, ...] = ()

    def _lexicon(self) -> frozenset:
        stems = {stem_word(v) for v in MOVING_VERBS}
        stems.add(stem_word(STATIC_VERB))
        stems.update(_EXTRA_VERB_STEMS)
        stems.update(stem_word(v) for v in self.extra_stems)
        return frozenset(stems)

    def verbs(self, text: str) -> list[str]:
        lex = self._lexicon()
        words = text.lower().replace(",", " ").replace(".", " ").split()
        return [w for w in words if stem_word(w) in lex]


class HashWordEmbedder:
    """Seedable word embedder: one unit vector per stem plus a small
    word-form component, so inflections of a stem stay above cosine 0.9."""

    DIM = 32
    _STEM_W = 0.97
    _FORM_W = 0.24

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _unit(self, key: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.DIM)
        return v / np.linalg.norm(v)

    def embed(self, word: str) -> np.ndarray:
        w = word.lower().strip()
        v = self._STEM_W * self._unit("stem:" + stem_word(w)) + self._FORM_W * self._unit("form:" + w)
        return (v / np.linalg.norm(v)).astype(np.float64)
