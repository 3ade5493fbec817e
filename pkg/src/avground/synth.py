"""Procedural paired (utterance, image) corpora with frame-level phone labels.

Utterances are spectrogram-like log-feature matrices built from per-phone
spectral templates.  All nuisance factors act additively in the log domain:

* speaker: a fixed spectral tilt per speaker (two speaker groups),
* noise (condition B): i.i.d. Gaussian noise per frame and bin,
* channel (condition C): a fixed coloration vector broadcast over frames,
* condition D: coloration followed by noise.

Images are 32x32 RGB canvases with one glyph (a unique mask and colour) per
object word.  A caption always names every object in its image, plus 0-3
filler words, so the pairing is semantically correlated by construction.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import ArchiveHeader, ArchiveRecord, read_archive, write_archive
from .errors import ConfigError, DataFormatError
from .seeding import child_seed, stream

CONDITIONS = ("A", "B", "C", "D")
MANNERS = ("vowel", "nasal", "fricative", "stop", "approximant")
MANNER_FRAMES = {"vowel": (5, 10), "nasal": (4, 8), "fricative": (4, 9), "stop": (3, 5), "approximant": (3, 7)}
GLYPH = 8


@dataclass
class Phone:
    symbol: str
    template: np.ndarray
    min_frames: int
    max_frames: int
    manner: str


@dataclass
class PhoneInventory:
    phones: list[Phone]

    def __len__(self) -> int:
        return len(self.phones)

    @property
    def templates(self) -> np.ndarray:
        return np.stack([p.template for p in self.phones])

    @property
    def manners(self) -> list[str]:
        return [p.manner for p in self.phones]


def _smooth_noise(rng, n, scale, width=3):
    kernel = np.hanning(2 * width + 3)[1:-1]
    kernel /= kernel.sum()
    return scale * np.convolve(rng.standard_normal(n + 2 * width), kernel, mode="valid")[:n]


def _bump(x, centre, width, amp):
    return amp * np.exp(-0.5 * ((x - centre) / width) ** 2)


def _phone_template(manner, rng, n_mels):
    x = np.linspace(0.0, 1.0, n_mels)
    if manner in ("vowel", "approximant"):
        amp = (2.0, 3.5) if manner == "vowel" else (1.0, 2.0)
        centres = np.sort([rng.uniform(0.03, 0.3), rng.uniform(0.25, 0.55), rng.uniform(0.5, 0.85)])
        spec = 0.5 - 1.5 * x
        for c in centres:
            spec += _bump(x, c, rng.uniform(0.03, 0.07), rng.uniform(*amp))
    elif manner == "nasal":
        spec = 0.5 - x + _bump(x, rng.uniform(0.02, 0.12), 0.06, 3.0) + _bump(x, rng.uniform(0.3, 0.7), 0.05, 1.0)
    elif manner == "fricative":
        spec = -0.5 + 3.0 / (1.0 + np.exp(-(x - rng.uniform(0.35, 0.8)) / 0.06))
    else:  # stop: broadband burst
        spec = np.full(n_mels, rng.uniform(0.5, 1.5)) + _smooth_noise(rng, n_mels, 2.0)
    return spec + _smooth_noise(rng, n_mels, 1.2)


def make_inventory(n_phones: int, n_mels: int = 40, seed: int = 0, min_distance: float = 3.0) -> PhoneInventory:
    """``n_phones`` templates with pairwise L2 distance above ``min_distance``."""
    rng = stream(seed, "inventory")
    phones: list[Phone] = []
    for i in range(n_phones):
        manner = MANNERS[i % len(MANNERS)]
        for _ in range(1000):
            tpl = _phone_template(manner, rng, n_mels)
            if all(np.linalg.norm(tpl - p.template) > min_distance for p in phones):
                break
        else:
            raise ConfigError("n_phones", f"cannot place {n_phones} templates {min_distance} apart")
        lo, hi = MANNER_FRAMES[manner]
        phones.append(Phone(f"ph{i:02d}", tpl, lo, hi, manner))
    return PhoneInventory(phones)


@dataclass
class Language:
    """Phone inventory, lexicon and object glyphs shared by every corpus split."""

    inventory: PhoneInventory
    spellings: dict[str, tuple[int, ...]]
    objects: list[str]
    fillers: list[str]
    glyph_masks: np.ndarray  # (V, GLYPH, GLYPH) bool
    glyph_colours: np.ndarray  # (V, 3)
    seed: int
    n_mels: int

    @property
    def vocab_size(self) -> int:
        return len(self.objects)

    def object_index(self, word: str) -> int:
        return self.objects.index(word)

    def speaker_group(self, speaker: int) -> int:
        return speaker % 2

    def speaker_tilt(self, speaker: int) -> np.ndarray:
        rng = stream(self.seed, "speaker", speaker)
        x = np.linspace(-1.0, 1.0, self.n_mels)
        group = 0.4 if self.speaker_group(speaker) == 0 else -0.4
        return group * x + rng.uniform(-0.4, 0.4) * x + _smooth_noise(rng, self.n_mels, 0.6)

    def channel_coloration(self, channel: int, scale: float = 1.0) -> np.ndarray:
        rng = stream(self.seed, "channel", channel)
        x = np.linspace(0.0, np.pi, self.n_mels)
        curve = sum(rng.uniform(-1, 1) * np.cos(k * x + rng.uniform(0, np.pi)) for k in (1, 2, 3))
        return scale * curve


def make_language(vocab_size=40, n_phones=20, n_fillers=8, n_mels=40, seed=0) -> Language:
    inventory = make_inventory(n_phones, n_mels, seed)
    rng = stream(seed, "lexicon")
    spellings: dict[str, tuple[int, ...]] = {}
    used: set[tuple[int, ...]] = set()

    def spell(lo, hi):
        while True:
            n = int(rng.integers(lo, hi + 1))
            seq = [int(rng.integers(n_phones))]
            while len(seq) < n:
                p = int(rng.integers(n_phones))
                if p != seq[-1]:
                    seq.append(p)
            if tuple(seq) not in used:
                used.add(tuple(seq))
                return tuple(seq)

    objects = [f"obj{i:02d}" for i in range(vocab_size)]
    fillers = [f"fil{i:02d}" for i in range(n_fillers)]
    for w in objects:
        spellings[w] = spell(3, 5)
    for w in fillers:
        spellings[w] = spell(2, 3)

    grng = stream(seed, "glyphs")
    masks, seen = [], set()
    while len(masks) < vocab_size:
        m = grng.random((GLYPH, GLYPH)) < 0.55
        if m.sum() >= 16 and m.tobytes() not in seen:
            seen.add(m.tobytes())
            masks.append(m)
    colours = grng.uniform(0.3, 1.0, size=(vocab_size, 3))
    return Language(inventory, spellings, objects, fillers, np.stack(masks), colours, seed, n_mels)


# -- records ----------------------------------------------------------------------


@dataclass
class UtteranceRecord:
    utt_id: str
    features: np.ndarray  # (T, F) float32
    labels: np.ndarray  # (T,) int
    words: tuple[str, ...]
    speaker: int
    condition: str = "A"
    parent: str | None = None

    def __post_init__(self):
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.utt_id}: {self.labels.shape} labels for {self.features.shape[0]} frames")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    presence: np.ndarray  # (V,) bool
    objects: tuple[str, ...]


@dataclass
class PairedExample:
    pair_id: str
    utterance: UtteranceRecord
    image: ImageRecord


def render_utterance(
    words: Sequence[str],
    speaker: int,
    language: Language,
    seed: int = 0,
    jitter: float = 0.1,
    durations: Sequence[int] | None = None,
    tilt: np.ndarray | None = None,
    utt_id: str = "",
) -> UtteranceRecord:
    """Concatenate phone segments for ``words`` as spoken by ``speaker`` (condition A).

    ``durations`` forces one frame count per phone; ``tilt`` overrides the
    speaker's spectral tilt (pass zeros for a flat tilt).
    """
    phones: list[int] = []
    for w in words:
        if w not in language.spellings:
            raise KeyError(f"unknown word {w!r}")
        phones.extend(language.spellings[w])
    if durations is not None and len(durations) != len(phones):
        raise ValueError(f"{len(durations)} durations for {len(phones)} phones")
    rng = np.random.default_rng(seed)
    inv = language.inventory
    if durations is None:
        durations = [int(rng.integers(inv.phones[p].min_frames, inv.phones[p].max_frames + 1)) for p in phones]
    labels = np.repeat(np.asarray(phones, dtype=np.int64), durations)
    base = inv.templates[labels]
    feats = base + jitter * rng.standard_normal(base.shape)
    feats += language.speaker_tilt(speaker) if tilt is None else tilt
    return UtteranceRecord(utt_id, feats.astype(np.float32), labels, tuple(words), int(speaker))


def _with_noise(features: np.ndarray, level: float, rng) -> np.ndarray:
    return features + (level * rng.standard_normal(features.shape)).astype(np.float32)


def _with_coloration(features: np.ndarray, coloration: np.ndarray) -> np.ndarray:
    return features + coloration.astype(np.float32)[None, :]


def apply_domain_shift(
    u: UtteranceRecord,
    condition: str,
    severity: float = 1.0,
    seed: int = 0,
    coloration: np.ndarray | None = None,
    noise_level: float = 1.0,
    utt_id: str | None = None,
) -> UtteranceRecord:
    """Derive a B/C/D record from a clean (A) parent; labels are untouched."""
    if u.condition != "A":
        raise ValueError(f"{u.utt_id}: domain shift applies to condition A only, got {u.condition}")
    if condition not in ("B", "C", "D"):
        raise ValueError(f"unknown condition {condition!r}")
    feats = u.features
    if condition in ("C", "D"):
        if coloration is None:
            raise ValueError(f"condition {condition} needs a channel coloration vector")
        feats = _with_coloration(feats, severity * np.asarray(coloration, dtype=np.float64))
    if condition in ("B", "D"):
        feats = _with_noise(feats, severity * noise_level, np.random.default_rng(seed))
    return UtteranceRecord(utt_id or u.utt_id, feats.astype(np.float32), u.labels, u.words, u.speaker,
                           condition, parent=u.utt_id)


def render_image(objects: Sequence[str], language: Language, seed: int = 0, size: int = 32) -> ImageRecord:
    if not 1 <= len(objects) <= 4:
        raise ValueError(f"need 1-4 objects, got {len(objects)}")
    for w in objects:
        if w not in language.objects:
            raise KeyError(f"{w!r} is not an object word")
    rng = np.random.default_rng(seed)
    pixels = np.zeros((3, size, size), dtype=np.float32)
    presence = np.zeros(language.vocab_size, dtype=bool)
    boxes: list[tuple[int, int]] = []
    for w in objects:
        for _ in range(100):
            r, c = (int(v) for v in rng.integers(0, size - GLYPH + 1, size=2))
            if all(abs(r - r2) >= GLYPH or abs(c - c2) >= GLYPH for r2, c2 in boxes):
                break
        else:
            raise ValueError(f"could not place {len(objects)} objects without overlap after 100 attempts")
        boxes.append((r, c))
        k = language.object_index(w)
        mask = language.glyph_masks[k]
        pixels[:, r : r + GLYPH, c : c + GLYPH] = mask[None] * language.glyph_colours[k][:, None, None]
        presence[k] = True
    return ImageRecord(pixels, presence, tuple(objects))


# -- corpus ------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    n_pairs: int = 2000
    vocab_size: int = 40
    n_phones: int = 20
    n_speakers: int = 16
    n_fillers: int = 8
    n_mels: int = 40
    condition_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    severity: float = 1.0
    noise_level: float = 1.0
    channel_scale: float = 1.5
    n_channels: int = 8
    jitter: float = 0.1
    image_size: int = 32
    n_probe_utterances: int = 400
    n_probe_speakers: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError("vocab_size", "must be >= 4")
        if self.n_phones < 6:
            raise ConfigError("n_phones", "must be >= 6")
        if self.n_pairs < 1:
            raise ConfigError("n_pairs", "must be >= 1")
        if self.n_speakers < 1 or self.n_probe_speakers < 2:
            raise ConfigError("n_speakers", "need >= 1 grounding and >= 2 probe speakers")
        mix = np.asarray(self.condition_mix, dtype=float)
        if mix.shape != (4,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
            raise ConfigError("condition_mix", "four non-negative weights summing to 1")
        if self.severity < 0 or self.jitter < 0:
            raise ConfigError("severity", "severity and jitter must be non-negative")


@dataclass
class Corpus:
    config: CorpusConfig
    language: Language
    pairs: list[PairedExample]
    probe: list[UtteranceRecord] = field(default_factory=list)

    def manifest_lines(self) -> list[str]:
        return [
            "\t".join([p.pair_id, f"utterances.gdfa#{p.pair_id}", f"images.gdfa#{p.pair_id}",
                       str(p.utterance.speaker), p.utterance.condition, " ".join(p.utterance.words)])
            for p in self.pairs
        ]

    def probe_manifest_lines(self) -> list[str]:
        return [
            "\t".join([u.utt_id, f"probe.gdfa#{u.utt_id}", "-", str(u.speaker), u.condition, " ".join(u.words)])
            for u in self.probe
        ]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(self.config, self.language, [self.pairs[i] for i in indices], self.probe)


def _caption(rng, language: Language) -> tuple[list[str], list[str]]:
    n_obj = int(rng.integers(1, 5))
    objects = [language.objects[i] for i in rng.choice(language.vocab_size, n_obj, replace=False)]
    fillers = [language.fillers[i] for i in rng.integers(0, len(language.fillers), size=int(rng.integers(0, 4)))]
    words = objects + fillers
    return objects, [words[i] for i in rng.permutation(len(words))]


def _shifted(u, condition, cfg: CorpusConfig, language: Language, channel: int, seed: int, utt_id: str):
    if condition == "A":
        return u
    coloration = language.channel_coloration(channel, cfg.channel_scale)
    return apply_domain_shift(u, condition, cfg.severity, seed, coloration, cfg.noise_level, utt_id=utt_id)


def generate_pair(cfg: CorpusConfig, language: Language, i: int) -> PairedExample:
    rng = stream(cfg.seed, "pair", i)
    objects, words = _caption(rng, language)
    speaker = int(rng.integers(cfg.n_speakers))
    condition = CONDITIONS[int(rng.choice(4, p=np.asarray(cfg.condition_mix) / np.sum(cfg.condition_mix)))]
    channel = int(rng.integers(cfg.n_channels))
    pid = f"p{i:05d}"
    u = render_utterance(words, speaker, language, child_seed(cfg.seed, "pair", i, "utt"), cfg.jitter, utt_id=pid)
    u = _shifted(u, condition, cfg, language, channel, child_seed(cfg.seed, "pair", i, "shift"), pid)
    img = render_image(objects, language, child_seed(cfg.seed, "pair", i, "img"), cfg.image_size)
    return PairedExample(pid, u, img)


def generate_probe_set(cfg: CorpusConfig, language: Language) -> list[UtteranceRecord]:
    """Clean parents plus their B/C/D derivatives, by unseen speakers and channels.

    The first half of the utterances forms the probe training split (``tr``
    prefix), the second half the test split (``te``), spoken by disjoint
    speaker sets.
    """
    out = []
    n = cfg.n_probe_utterances
    half_spk = cfg.n_probe_speakers // 2
    for j in range(n):
        rng = stream(cfg.seed, "probe", j)
        _, words = _caption(rng, language)
        train = j < n // 2
        speaker = cfg.n_speakers + int(rng.integers(half_spk)) + (0 if train else half_spk)
        channel = cfg.n_channels + int(rng.integers(cfg.n_channels))
        base = f"{'tr' if train else 'te'}{j:05d}"
        parent = render_utterance(words, speaker, language, child_seed(cfg.seed, "probe", j, "utt"), cfg.jitter,
                                  utt_id=f"{base}-A")
        out.append(parent)
        for cond in ("B", "C", "D"):
            out.append(_shifted(parent, cond, cfg, language, channel, child_seed(cfg.seed, "probe", j, "shift"),
                                f"{base}-{cond}"))
    return out


def generate_corpus(cfg: CorpusConfig, jobs: int = 1) -> Corpus:
    """Every pair draws from its own seeded stream, so ``jobs`` does not change the output."""
    cfg.validate()
    language = make_language(cfg.vocab_size, cfg.n_phones, cfg.n_fillers, cfg.n_mels, cfg.seed)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            pairs = list(pool.map(lambda i: generate_pair(cfg, language, i), range(cfg.n_pairs)))
    else:
        pairs = [generate_pair(cfg, language, i) for i in range(cfg.n_pairs)]
    return Corpus(cfg, language, pairs, generate_probe_set(cfg, language))


def probe_split(utt_id: str) -> str:
    return "train" if utt_id.startswith("tr") else "test"


# -- persistence -------------------------------------------------------------------


def _utterance_archive(records: Sequence[UtteranceRecord], n_mels: int) -> tuple[list[ArchiveRecord], ArchiveHeader]:
    recs = [ArchiveRecord(u.utt_id, u.features, u.labels, u.condition) for u in records]
    return recs, ArchiveHeader("FBANK", n_mels, 1, "")


def save_corpus(corpus: Corpus, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    meta = {
        "config": asdict(cfg),
        "phones": [{"symbol": p.symbol, "manner": p.manner, "frames": [p.min_frames, p.max_frames]}
                   for p in corpus.language.inventory.phones],
        "lexicon": {w: list(s) for w, s in corpus.language.spellings.items()},
    }
    paths = [out / "corpus.json", out / "manifest.tsv", out / "probe_manifest.tsv"]
    paths[0].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    paths[1].write_text("".join(line + "\n" for line in corpus.manifest_lines()))
    paths[2].write_text("".join(line + "\n" for line in corpus.probe_manifest_lines()))
    recs, header = _utterance_archive([p.utterance for p in corpus.pairs], cfg.n_mels)
    paths.append(write_archive(recs, header, out / "utterances.gdfa"))
    size = cfg.image_size
    imgs = [ArchiveRecord(p.pair_id, p.image.pixels.reshape(3 * size, size)) for p in corpus.pairs]
    paths.append(write_archive(imgs, ArchiveHeader("IMAGE", size, 1, ""), out / "images.gdfa"))
    recs, header = _utterance_archive(corpus.probe, cfg.n_mels)
    paths.append(write_archive(recs, header, out / "probe.gdfa"))
    return paths


def _parse_manifest(path: Path):
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        cols = line.split("\t")
        if len(cols) != 6:
            raise DataFormatError(f"{path}:{n}: expected 6 tab-separated fields, got {len(cols)}")
        rows.append(cols)
    return rows


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    if not (d / "corpus.json").exists():
        raise DataFormatError(f"{d}: not a corpus directory (corpus.json missing)")
    meta = json.loads((d / "corpus.json").read_text())
    raw = dict(meta["config"])
    raw["condition_mix"] = tuple(raw["condition_mix"])
    cfg = CorpusConfig(**raw)
    language = make_language(cfg.vocab_size, cfg.n_phones, cfg.n_fillers, cfg.n_mels, cfg.seed)
    _, utts = read_archive(d / "utterances.gdfa")
    _, imgs = read_archive(d / "images.gdfa")
    by_id = {r.utt_id: r for r in utts}
    img_by_id = {r.utt_id: r for r in imgs}
    pairs = []
    for pid, _, _, speaker, cond, words in _parse_manifest(d / "manifest.tsv"):
        rec, img = by_id[pid], img_by_id[pid]
        words_t = tuple(words.split())
        objects = tuple(w for w in words_t if w in language.objects)
        presence = np.zeros(language.vocab_size, dtype=bool)
        presence[[language.object_index(w) for w in objects]] = True
        u = UtteranceRecord(pid, rec.frames, rec.labels, words_t, int(speaker), cond, None if cond == "A" else pid)
        pixels = img.frames.reshape(3, cfg.image_size, cfg.image_size)
        pairs.append(PairedExample(pid, u, ImageRecord(pixels, presence, objects)))
    _, probe_recs = read_archive(d / "probe.gdfa")
    probe_meta = {row[0]: row for row in _parse_manifest(d / "probe_manifest.tsv")}
    probe = []
    for r in probe_recs:
        _, _, _, speaker, cond, words = probe_meta[r.utt_id]
        parent = None if cond == "A" else r.utt_id[:-1] + "A"
        probe.append(UtteranceRecord(r.utt_id, r.frames, r.labels, tuple(words.split()), int(speaker), cond, parent))
    return Corpus(cfg, language, pairs, probe)
