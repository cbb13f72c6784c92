"""First-pass diarization: sliding windows over speech, embeddings,
two-covariance PLDA scoring, cross-array score fusion and average-linkage AHC."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import FeatureMatrix, MultichannelAudio, logmel
from .segments import FRAME_SHIFT_SEC, Segment, sort_segments

MIN_WINDOW_SEC = 0.5
EMBED_MELS = 24
MIN_EMBED_FRAMES = 10
PLDA_MAGIC = b"PLDA"
PLDA_VERSION = 1
_EPS = 1e-9


@dataclass(frozen=True)
class SubsegmentGrid:
    windows: list  # (onset_sec, duration_sec)
    speech: list = field(default_factory=list)  # the speech segments the windows came from
    parents: list = field(default_factory=list)  # speech-segment index per window
    window_sec: float = 1.5
    stride_sec: float = 0.25

    def __len__(self):
        return len(self.windows)

    def centers(self) -> np.ndarray:
        return np.array([on + dur / 2 for on, dur in self.windows])


def cut_subsegments(speech, window_sec: float = 1.5, stride_sec: float = 0.25) -> SubsegmentGrid:
    """Fixed-length windows every ``stride_sec`` inside each speech segment.

    Segment tails not reached by a full window get one shortened window from
    the next stride position, kept if it lasts at least 0.5 s. Segments
    shorter than a window get a single window covering them.
    """
    if not 0 < stride_sec <= window_sec:
        raise ValueError("need 0 < stride <= window")
    speech = sort_segments(speech)
    windows, parents = [], []
    for idx, seg in enumerate(speech):
        k = 0
        while k * stride_sec + window_sec <= seg.duration + _EPS:
            windows.append((round(seg.onset + k * stride_sec, 6), window_sec))
            parents.append(idx)
            k += 1
        start = k * stride_sec if k else 0.0
        covered_to = (k - 1) * stride_sec + window_sec if k else 0.0
        rest = seg.duration - start
        if covered_to < seg.duration - _EPS and rest >= MIN_WINDOW_SEC - _EPS:
            windows.append((round(seg.onset + start, 6), round(rest, 6)))
            parents.append(idx)
    return SubsegmentGrid(windows, speech, parents, window_sec, stride_sec)


# --------------------------------------------------------------------------
# Embeddings


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    window: tuple = (0.0, 0.0)
    array_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a finite vector")
        object.__setattr__(self, "vector", v)


def reference_embedding(features: FeatureMatrix) -> np.ndarray:
    """Mean and standard deviation of each feature row, length-normalised."""
    if features.num_frames < MIN_EMBED_FRAMES:
        raise ValueError(f"window has {features.num_frames} frames, need {MIN_EMBED_FRAMES}")
    rows = features.rows
    stats = np.concatenate([rows.mean(axis=0), rows.std(axis=0)])
    norm = np.linalg.norm(stats)
    return stats / norm if norm > 0 else stats


def embedding_features(audio: MultichannelAudio) -> FeatureMatrix:
    """24 log-mel bands of channel 0 on a 10 ms grid."""
    mono = MultichannelAudio(audio.samples[:1], audio.sample_rate)
    return logmel(mono, num_mels=EMBED_MELS, fft_size=512, frame_shift=int(round(FRAME_SHIFT_SEC * audio.sample_rate)))


def extract_embeddings(features: FeatureMatrix, grid: SubsegmentGrid, array_id: int = 0,
                       normalize_mean: bool = True) -> list[Embedding]:
    """One reference embedding per window.

    With ``normalize_mean`` the features are first centred on the mean of the
    speech frames, which removes the array's channel colouring.
    """
    rows = features.rows
    shift = features.frame_shift_sec
    if normalize_mean and grid.speech:
        mask = np.zeros(len(rows), dtype=bool)
        for seg in grid.speech:
            mask[int(round(seg.onset / shift)) : int(round(seg.end / shift))] = True
        if mask.any():
            rows = rows - rows[mask].mean(axis=0)
    out = []
    for onset, dur in grid.windows:
        a = int(round(onset / shift))
        b = min(len(rows), max(a + MIN_EMBED_FRAMES, int(round((onset + dur) / shift))))
        a = max(0, b - max(MIN_EMBED_FRAMES, b - a))
        out.append(Embedding(reference_embedding(FeatureMatrix(rows[a:b], shift)), (onset, dur), array_id))
    return out


# --------------------------------------------------------------------------
# PLDA


@dataclass(frozen=True)
class PldaModel:
    mean: np.ndarray
    between: np.ndarray  # B
    within: np.ndarray  # W

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        b = np.asarray(self.between, dtype=np.float64)
        w = np.asarray(self.within, dtype=np.float64)
        d = mean.shape[0]
        if b.shape != (d, d) or w.shape != (d, d):
            raise ValueError("covariance shapes do not match the mean")
        if not np.allclose(w, w.T) or not np.allclose(b, b.T):
            raise ValueError("covariances must be symmetric")
        if np.linalg.eigvalsh(w).min() <= 0:
            raise ValueError("within-speaker covariance must be positive definite")
        for name, value in (("mean", mean), ("between", b), ("within", w)):
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def scoring_terms(self):
        """(diagonal quadratic form, cross form, constant) of the closed-form LLR.

        With T = B + W the same-speaker pair covariance is [[T, B], [B, T]];
        its inverse has blocks P on the diagonal and Q off it.
        """
        total = self.between + self.within
        total_inv = np.linalg.inv(total)
        p = np.linalg.inv(total - self.between @ total_inv @ self.between)
        q = -total_inv @ self.between @ p
        joint = np.block([[total, self.between], [self.between, total]])
        const = np.linalg.slogdet(total)[1] - 0.5 * np.linalg.slogdet(joint)[1]
        diag = total_inv - p
        return (diag + diag.T) / 2, (q + q.T) / 2, const


def plda_train(embeddings, labels) -> PldaModel:
    """Two-covariance PLDA by moment matching.

    ``B`` is the covariance of speaker means about the global mean and ``W``
    the pooled within-speaker covariance plus a small ridge.
    """
    x = np.asarray([getattr(e, "vector", e) for e in embeddings], dtype=np.float64)
    labels = np.asarray(labels)
    speakers = sorted(set(labels.tolist()))
    if len(speakers) < 2:
        raise ValueError("PLDA training needs at least two speakers")
    mean = x.mean(axis=0)
    d = x.shape[1]
    spk_means = np.stack([x[labels == s].mean(axis=0) for s in speakers])
    centred = spk_means - mean
    between = centred.T @ centred / len(speakers)
    index = {s: i for i, s in enumerate(speakers)}
    resid = x - spk_means[[index[s] for s in labels.tolist()]]
    within = resid.T @ resid / len(x)
    ridge = max(1e-6 * np.trace(within) / d, 1e-10)
    within = (within + within.T) / 2 + ridge * np.eye(d)
    return PldaModel(mean, (between + between.T) / 2, within)


def plda_score(model: PldaModel, e1, e2) -> float:
    x = np.asarray(getattr(e1, "vector", e1), dtype=np.float64)
    y = np.asarray(getattr(e2, "vector", e2), dtype=np.float64)
    if x.shape != (model.dim,) or y.shape != (model.dim,):
        raise ValueError("embedding dimension does not match the model")
    x, y = x - model.mean, y - model.mean
    diag, cross, const = model.scoring_terms()
    return float(0.5 * (x @ diag @ x + y @ diag @ y) - x @ cross @ y + const)


def plda_score_matrix(model: PldaModel, embeddings) -> np.ndarray:
    x = np.asarray([getattr(e, "vector", e) for e in embeddings], dtype=np.float64) - model.mean
    if x.shape[1] != model.dim:
        raise ValueError("embedding dimension does not match the model")
    diag, cross, const = model.scoring_terms()
    a = np.einsum("ij,jk,ik->i", x, diag, x)
    scores = 0.5 * (a[:, None] + a[None, :]) - x @ cross @ x.T + const
    return (scores + scores.T) / 2


def save_plda(path, model: PldaModel) -> None:
    with open(path, "wb") as fh:
        fh.write(PLDA_MAGIC + struct.pack("<II", PLDA_VERSION, model.dim))
        for arr in (model.mean, model.between, model.within):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_plda(path) -> PldaModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PLDA_MAGIC or len(data) < 12:
        raise ValueError(f"{path}: not a PLDA model file")
    version, d = struct.unpack("<II", data[4:12])
    if version != PLDA_VERSION:
        raise ValueError(f"{path}: unsupported PLDA version {version}")
    need = 12 + 8 * (d + 2 * d * d)
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    values = np.frombuffer(data[12:], dtype="<f8")
    return PldaModel(values[:d].copy(), values[d : d + d * d].reshape(d, d).copy(),
                     values[d + d * d :].reshape(d, d).copy())


# --------------------------------------------------------------------------
# Fusion and clustering


def fuse_plda_scores(per_array, criterion: str = "max") -> np.ndarray:
    mats = [np.asarray(m, dtype=np.float64) for m in per_array]
    if not mats:
        raise ValueError("no score matrices to fuse")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("score matrices differ in shape")
    stacked = np.stack(mats)
    if criterion == "max":
        return stacked.max(axis=0)
    if criterion == "mean":
        return stacked.mean(axis=0)
    raise ValueError(f"unknown fusion criterion {criterion!r}")


def ahc_cluster(sim, threshold: float | None = None, num_clusters: int | None = None) -> np.ndarray:
    """Average-linkage agglomerative clustering on a similarity matrix.

    Merges the most similar pair (lowest index pair on ties) until the best
    linkage falls below ``threshold`` or ``num_clusters`` remain. Labels are
    0-based in order of first appearance.
    """
    sim = np.array(sim, dtype=np.float64)
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if (threshold is None) == (num_clusters is None):
        raise ValueError("give exactly one of threshold or num_clusters")
    if num_clusters is not None and num_clusters < 1:
        raise ValueError("num_clusters must be >= 1")
    if n == 0:
        return np.zeros(0, dtype=int)
    assign = np.arange(n)
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    link = sim.copy()
    np.fill_diagonal(link, -np.inf)
    count = n
    while count > 1:
        if num_clusters is not None and count <= num_clusters:
            break
        masked = np.where(alive[:, None] & alive[None, :], link, -np.inf)
        flat = int(np.argmax(np.triu(masked, 1) + np.tril(np.full((n, n), -np.inf))))
        i, j = divmod(flat, n)
        best = masked[i, j]
        if threshold is not None and best < threshold:
            break
        merged = (sizes[i] * link[i] + sizes[j] * link[j]) / (sizes[i] + sizes[j])
        link[i, :] = merged
        link[:, i] = merged
        link[i, i] = -np.inf
        sizes[i] += sizes[j]
        alive[j] = False
        assign[assign == j] = i
        count -= 1
    _, first = np.unique(assign, return_index=True)
    order = {root: rank for rank, root in enumerate(assign[np.sort(first)])}
    return np.array([order[a] for a in assign], dtype=int)


def windows_to_segments(labels, grid: SubsegmentGrid, frame_shift: float = FRAME_SHIFT_SEC,
                        prefix: str = "spk") -> list[Segment]:
    """Every speech frame takes the label of the nearest window centre within
    its own speech segment (any window if that segment has none)."""
    labels = np.asarray(labels)
    if len(labels) != len(grid):
        raise ValueError("one label per window required")
    if not len(grid):
        return []
    centers = grid.centers()
    parents = np.asarray(grid.parents) if grid.parents else np.zeros(len(grid), dtype=int)
    out = []
    for idx, seg in enumerate(grid.speech):
        a = int(round(seg.onset / frame_shift))
        b = int(round(seg.end / frame_shift))
        if b <= a:
            continue
        own = np.flatnonzero(parents == idx)
        cand = own if own.size else np.arange(len(grid))
        t = (np.arange(a, b) + 0.5) * frame_shift
        nearest = cand[np.argmin(np.abs(t[:, None] - centers[cand][None, :]), axis=1)]
        frame_labels = labels[nearest]
        change = np.flatnonzero(np.diff(frame_labels)) + 1
        bounds = np.concatenate([[0], change, [b - a]])
        for s, e in zip(bounds[:-1], bounds[1:]):
            out.append(Segment((a + s) * frame_shift, (e - s) * frame_shift, f"{prefix}{frame_labels[s]}"))
    return out


def first_pass(audios, speech, plda: PldaModel, num_speakers: int | None = 4, threshold: float | None = None,
               fusion: str = "max", window_sec: float = 1.5, stride_sec: float = 0.25):
    """Windows → per-array embeddings and PLDA scores → fused AHC → labelled segments.

    Returns ``(segments, grid, labels)``.
    """
    grid = cut_subsegments(speech, window_sec, stride_sec)
    if not len(grid):
        return [], grid, np.zeros(0, dtype=int)
    mats = []
    for k, audio in enumerate(audios):
        embs = extract_embeddings(embedding_features(audio), grid, array_id=k)
        mats.append(plda_score_matrix(plda, embs))
    sim = fuse_plda_scores(mats, fusion)
    if num_speakers is not None:
        labels = ahc_cluster(sim, num_clusters=min(num_speakers, len(grid)))
    else:
        labels = ahc_cluster(sim, threshold=0.0 if threshold is None else threshold)
    return windows_to_segments(labels, grid), grid, labels


def simulated_training_set(num_scenes: int = 12, seed: int = 1000, speakers_per_scene: int = 4,
                           window_sec: float = 1.5, stride_sec: float = 0.25):
    """Embeddings and speaker ids from non-overlapping simulator scenes.

    Every scene draws fresh speakers, so ``(scene, speaker)`` is a distinct
    identity. Each array contributes its own embeddings, which puts channel
    variability into the within-speaker covariance.
    """
    from .simulate import SceneSpec, simulate_scene

    vectors, ids = [], []
    for n in range(num_scenes):
        spec = SceneSpec(num_speakers=speakers_per_scene, num_arrays=2, channels_per_array=1,
                         duration_sec=30.0, seed=seed + n)
        audios, truth = simulate_scene(spec)
        for k, audio in enumerate(audios):
            feats = embedding_features(audio)
            for label in truth.speakers:
                segs = [s for s in truth.reference if s.label == label]
                grid = cut_subsegments(segs, window_sec, stride_sec)
                for emb in extract_embeddings(feats, grid, k):
                    vectors.append(emb.vector)
                    ids.append(f"{n}:{label}")
    return np.array(vectors), np.array(ids)


def train_simulated_plda(num_scenes: int = 12, seed: int = 1000) -> PldaModel:
    vectors, ids = simulated_training_set(num_scenes, seed)
    return plda_train(vectors, ids)
