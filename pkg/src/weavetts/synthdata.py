"""Deterministic synthetic corpus: token-to-mel-template pairs.

Each vocabulary token maps to a fixed sinusoidal mel template so that a
trained model can be scored objectively (nearest-template classification
is a word-accuracy proxy, frame MSE a fidelity proxy) without any real
audio. Generation uses the counter-based Philox-4x64 bit generator with
explicit per-utterance keys, so corpora are reproducible and utterances
can be generated independently.

Template for token v, local step s (0..frames_per_token-1), mel bin b:

    sin(2*pi*(v+1)*s/frames_per_token + pi*b/n_mels + 2*pi*v/vocab_size)

scaled by a per-speaker gain, plus Gaussian noise. The per-token phase
term keeps tokens whose frequencies coincide modulo frames_per_token
distinguishable (without it, e.g. tokens 0 and 4 are identical when
frames_per_token is 4).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import NoOutput
from .melfile import read_melf, write_melf

DEFAULT_FRAME_SHIFT_MS = 12.5

# splitmix64 constants; used only for the seed-stable train/val split
_SPLIT_GAMMA = 0x9E3779B97F4A7C15
_SPLIT_M1 = 0xBF58476D1CE4E5B9
_SPLIT_M2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 16
    n_mels: int = 8
    frames_per_token: int = 4
    n_utterances: int = 2000
    min_tokens: int = 2
    max_tokens: int = 8
    speaker_count: int = 4
    noise_std: float = 0.05
    seed: int = 1234

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.n_mels, self.frames_per_token,
               self.n_utterances, self.min_tokens, self.speaker_count) < 1:
            raise ValueError("corpus spec fields must be positive")
        if self.max_tokens < self.min_tokens:
            raise ValueError("max_tokens must be >= min_tokens")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Utterance:
    utt_id: int
    tokens: np.ndarray
    mel: np.ndarray  # (T, n_mels) float32, corpus-normalized
    speaker_id: int


@dataclass
class Corpus:
    train: List[Utterance]
    val: List[Utterance]
    mel_mean: float
    mel_std: float
    spec: CorpusSpec

    @property
    def utterances(self) -> List[Utterance]:
        return self.train + self.val


def _splitmix64(x: int) -> int:
    x = (x + _SPLIT_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * _SPLIT_M1) & _MASK64
    x = ((x ^ (x >> 27)) * _SPLIT_M2) & _MASK64
    return x ^ (x >> 31)


def _is_validation(utt_id: int, seed: int) -> bool:
    return _splitmix64(_splitmix64(seed) ^ utt_id) % 10 == 0


def _utterance_rng(spec: CorpusSpec, utt_id: int) -> np.random.Generator:
    key = np.array([spec.seed & _MASK64, utt_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def speaker_gain(speaker_id: int, speaker_count: int) -> float:
    """Gains spread evenly over [0.5, 1.5]; a single speaker gets 1.0."""
    if speaker_count == 1:
        return 1.0
    return 0.5 + speaker_id / (speaker_count - 1)


END_DECAY_FLOOR = 0.15


def token_template(token: int, spec: CorpusSpec) -> np.ndarray:
    """Clean (gain-1, unnormalized) template for one token, (F, n_mels)."""
    steps = np.arange(spec.frames_per_token, dtype=np.float64)[:, None]
    bins = np.arange(spec.n_mels, dtype=np.float64)[None, :]
    phase = (
        2.0 * np.pi * (token + 1) * steps / spec.frames_per_token
        + np.pi * bins / spec.n_mels
        + 2.0 * np.pi * token / spec.vocab_size
    )
    return np.sin(phase)


def end_decay_envelope(frames_per_token: int) -> np.ndarray:
    """Amplitude ramp applied to an utterance's final token slot.

    Real speech carries acoustic finality cues; without one, the end of an
    utterance is indistinguishable from any interior group boundary and
    stop prediction cannot be learned from content at all.
    """
    return np.linspace(1.0, END_DECAY_FLOOR, frames_per_token)


def clean_mel(tokens: np.ndarray, gain: float, spec: CorpusSpec) -> np.ndarray:
    """Noise-free, unnormalized mel for a token sequence, with the decay
    envelope on the final slot."""
    mel = np.concatenate([token_template(int(t), spec) for t in tokens], axis=0)
    mel[-spec.frames_per_token :] *= end_decay_envelope(spec.frames_per_token)[:, None]
    return gain * mel


def _raw_utterance(spec: CorpusSpec, utt_id: int) -> Tuple[np.ndarray, np.ndarray, int]:
    rng = _utterance_rng(spec, utt_id)
    length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    tokens = rng.integers(0, spec.vocab_size, size=length).astype(np.int64)
    speaker = int(rng.integers(0, spec.speaker_count))
    mel = clean_mel(tokens, speaker_gain(speaker, spec.speaker_count), spec)
    if spec.noise_std > 0:
        mel = mel + rng.normal(0.0, spec.noise_std, size=mel.shape)
    return tokens, mel, speaker


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate, normalize, and split the corpus.

    Normalization is global: one scalar mean and std over every mel value
    in the corpus, accumulated in float64.
    """
    raw = [_raw_utterance(spec, i) for i in range(spec.n_utterances)]
    stacked = np.concatenate([mel.reshape(-1) for _, mel, _ in raw])
    mean = float(stacked.mean())
    std = float(stacked.std())
    if std == 0.0:
        std = 1.0

    train: List[Utterance] = []
    val: List[Utterance] = []
    for utt_id, (tokens, mel, speaker) in enumerate(raw):
        normalized = ((mel - mean) / std).astype(np.float32)
        utt = Utterance(utt_id=utt_id, tokens=tokens, mel=normalized, speaker_id=speaker)
        (val if _is_validation(utt_id, spec.seed) else train).append(utt)
    return Corpus(train=train, val=val, mel_mean=mean, mel_std=std, spec=spec)


def normalized_template_bank(spec: CorpusSpec, gain: float, mel_mean: float,
                             mel_std: float) -> np.ndarray:
    """All vocab templates under one speaker gain, corpus-normalized:
    (vocab_size, frames_per_token, n_mels)."""
    bank = np.stack([gain * token_template(v, spec) for v in range(spec.vocab_size)])
    return ((bank - mel_mean) / mel_std).astype(np.float32)


def classify_slots(mel: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Nearest-template token per full slot of frames_per_token frames."""
    frames_per_token = bank.shape[1]
    n_slots = mel.shape[0] // frames_per_token
    if n_slots == 0:
        return np.empty(0, dtype=np.int64)
    slots = mel[: n_slots * frames_per_token].reshape(n_slots, frames_per_token, -1)
    # (slots, vocab): squared distance to each template
    diff = slots[:, None, :, :] - bank[None, :, :, :]
    dist = np.einsum("svfb,svfb->sv", diff, diff)
    return dist.argmin(axis=1)


def score_reconstruction(
    predicted: np.ndarray,
    reference: Utterance,
    corpus: Corpus,
) -> Dict[str, float]:
    """Frame MSE over the aligned overlap plus nearest-template accuracy.

    Accuracy is scored against every reference token: a slot matches when
    the prediction covers it and its nearest normalized template (under
    the reference speaker's gain) is the true token. Slots the prediction
    never reached count as misses, so stopping early costs accuracy.
    """
    predicted = np.asarray(predicted, dtype=np.float32)
    if predicted.size == 0:
        raise NoOutput("empty prediction")
    if predicted.ndim != 2 or predicted.shape[1] != reference.mel.shape[1]:
        raise NoOutput(f"prediction shape {predicted.shape} incompatible with reference")

    overlap = min(len(predicted), len(reference.mel))
    diff = predicted[:overlap].astype(np.float64) - reference.mel[:overlap].astype(np.float64)
    frame_mse = float(np.mean(diff * diff))

    spec = corpus.spec
    gain = speaker_gain(reference.speaker_id, spec.speaker_count)
    bank = normalized_template_bank(spec, gain, corpus.mel_mean, corpus.mel_std)
    covered = min(overlap // spec.frames_per_token, len(reference.tokens))
    if covered == 0:
        matches = 0
    else:
        predicted_tokens = classify_slots(predicted[: covered * spec.frames_per_token], bank)
        matches = int(np.sum(predicted_tokens == reference.tokens[:covered]))
    accuracy = matches / len(reference.tokens)
    return {"frame_mse": frame_mse, "template_accuracy": accuracy}


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": asdict(corpus.spec),
        "mel_mean": corpus.mel_mean,
        "mel_std": corpus.mel_std,
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
        for utt in corpus.utterances:
            split = "val" if _is_validation(utt.utt_id, corpus.spec.seed) else "train"
            row = {
                "id": utt.utt_id,
                "speaker": utt.speaker_id,
                "tokens": [int(t) for t in utt.tokens],
                "split": split,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
            write_melf(out / f"utt_{utt.utt_id:05d}.melf", utt.mel, DEFAULT_FRAME_SHIFT_MS)


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    meta = json.loads((root / "meta.json").read_text())
    spec = CorpusSpec(**meta["spec"])
    train: List[Utterance] = []
    val: List[Utterance] = []
    with open(root / "manifest.jsonl", "r", encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            mel, _ = read_melf(root / f"utt_{row['id']:05d}.melf")
            utt = Utterance(
                utt_id=row["id"],
                tokens=np.asarray(row["tokens"], dtype=np.int64),
                mel=mel,
                speaker_id=row["speaker"],
            )
            (val if row["split"] == "val" else train).append(utt)
    return Corpus(train=train, val=val, mel_mean=meta["mel_mean"],
                  mel_std=meta["mel_std"], spec=spec)
