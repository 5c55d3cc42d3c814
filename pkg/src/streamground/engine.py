"""Autoregressive streaming loop: push frames one at a time, collect a tube.

A :class:`StreamState` owns the per-stream mutable pieces (memory banks,
frame cursor, previous raw frame for the motion difference, collected
outputs). Frames must arrive strictly in order; everything emitted for frame
i depends only on frames 0..i and the query. ``ground`` is the convenience
wrapper that streams a whole episode and decodes the segment.

Per-frame activation footprints are metered through the tensor allocation
hook so the O(1)-decode-state property is checkable; bank growth is reported
separately.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend
from . import tensor as T
from .model import GroundingModel
from .synthworld import SyntheticEpisode, encode_query_tokens


@dataclass
class TubePrediction:
    boxes: np.ndarray          # (T, 4) cxcywh
    start_scores: np.ndarray   # (T,) raw per-frame sigmoids
    end_scores: np.ndarray     # (T,)
    segment: tuple[int, int]   # inclusive

    @property
    def n_frames(self) -> int:
        return self.boxes.shape[0]


@dataclass
class StreamState:
    tokens: np.ndarray
    mask: np.ndarray
    banks: tuple
    seq_tau: float = 1.0
    cursor: int = 0
    prev_grid: np.ndarray | None = None
    boxes: list = field(default_factory=list)
    start_scores: list = field(default_factory=list)
    end_scores: list = field(default_factory=list)
    activation_peak: int = 0     # max per-frame tensor bytes seen so far


class StreamOrderError(RuntimeError):
    """A frame arrived out of order."""


def start_stream(model: GroundingModel, tokens: np.ndarray,
                 mask: np.ndarray) -> StreamState:
    return StreamState(tokens=np.asarray(tokens, dtype=np.int64),
                       mask=np.asarray(mask, dtype=bool),
                       banks=model.fresh_banks(),
                       seq_tau=model.cfg.seq_tau)


def step(model: GroundingModel, state: StreamState, frame_grid: np.ndarray,
         frame_index: int | None = None) -> tuple[np.ndarray, float, float]:
    """Process the next frame; returns (box, start_score, end_score)."""
    if frame_index is not None and frame_index != state.cursor:
        raise StreamOrderError(
            f"expected frame {state.cursor}, got {frame_index}")
    prev = state.prev_grid if state.prev_grid is not None else frame_grid
    motion_raw = frame_grid - prev

    frame_bytes = 0

    def hook(n: int) -> None:
        nonlocal frame_bytes
        frame_bytes += n

    T.set_alloc_hook(hook)
    try:
        with T.no_grad():
            box_t, scores_t, _ = model.forward_frame(
                state.banks, frame_grid, motion_raw, state.tokens, state.mask,
                train=False)
    finally:
        T.set_alloc_hook(None)

    state.activation_peak = max(state.activation_peak, frame_bytes)
    state.prev_grid = frame_grid.copy()
    state.cursor += 1
    box = box_t.data.reshape(4).copy()
    hs, he = float(scores_t.data.reshape(2)[0]), float(scores_t.data.reshape(2)[1])
    state.boxes.append(box)
    state.start_scores.append(hs)
    state.end_scores.append(he)
    return box, hs, he


def decode_segment(start_scores, end_scores, tau: float = 1.0) -> tuple[int, int]:
    """Best (s, e), s <= e, maximizing normalized start*end probability.

    Scores are normalized to distributions over frames with a softmax (same
    temperature as the training-time normalization) before the
    exhaustive-equivalent prefix-max scan; ties resolve to the smallest s,
    then the smallest e.
    """
    hs = np.asarray(start_scores, dtype=float).reshape(-1)
    he = np.asarray(end_scores, dtype=float).reshape(-1)
    if hs.size != he.size:
        raise ValueError(f"score lists differ in length: {hs.size} vs {he.size}")
    if hs.size == 0:
        raise ValueError("cannot decode an empty score list")
    ps = backend.softmax_fwd(hs.reshape(1, -1) / tau).reshape(-1)
    pe = backend.softmax_fwd(he.reshape(1, -1) / tau).reshape(-1)
    s, e = backend.best_segment(ps, pe)
    return int(s), int(e)


def finish_stream(state: StreamState) -> TubePrediction:
    if state.cursor == 0:
        raise ValueError("no frames were streamed")
    seg = decode_segment(state.start_scores, state.end_scores,
                         tau=state.seq_tau)
    return TubePrediction(boxes=np.stack(state.boxes),
                          start_scores=np.asarray(state.start_scores),
                          end_scores=np.asarray(state.end_scores),
                          segment=seg)


def ground(model: GroundingModel, episode: SyntheticEpisode) -> TubePrediction:
    """Stream every frame of an episode and decode its tube."""
    if episode.n_frames < 1:
        raise ValueError("empty video")
    tokens, mask = encode_query_tokens(episode, model.cfg.n_t)
    state = start_stream(model, tokens, mask)
    for i in range(episode.n_frames):
        step(model, state, episode.frames[i].grid, frame_index=i)
    return finish_stream(state)


# ---------------------------------------------------------------------------
# training-time streaming (tape attached, soft pooling)
# ---------------------------------------------------------------------------

def stream_episode_train(model: GroundingModel, episode: SyntheticEpisode
                         ) -> tuple[list, list]:
    """Forward a whole episode with gradients; returns per-frame tensors.

    The caller must hold an active Tape. Returns ([box (1,4)], [scores (1,2)]).
    """
    tokens, mask = encode_query_tokens(episode, model.cfg.n_t)
    banks = model.fresh_banks()
    prev = episode.frames[0].grid
    boxes, scores = [], []
    for i in range(episode.n_frames):
        grid = episode.frames[i].grid
        box_t, score_t, _ = model.forward_frame(
            banks, grid, grid - prev, tokens, mask, train=True,
            gt_box=episode.gt_boxes[i] if _inside(episode, i) else None)
        prev = grid
        boxes.append(box_t)
        scores.append(score_t)
    return boxes, scores


def _inside(episode: SyntheticEpisode, i: int) -> bool:
    s, e = episode.gt_segment
    return s <= i <= e


# ---------------------------------------------------------------------------
# tube files and stream-state serialization
# ---------------------------------------------------------------------------

def write_tube_jsonl(path, tube: TubePrediction) -> None:
    """One record per frame plus a trailer record with the decoded segment."""
    with open(path, "w") as f:
        for i in range(tube.n_frames):
            rec = {"frame": i,
                   "box": [round(float(v), 10) for v in tube.boxes[i]],
                   "hs": round(float(tube.start_scores[i]), 10),
                   "he": round(float(tube.end_scores[i]), 10)}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(json.dumps({"segment": [int(tube.segment[0]),
                                        int(tube.segment[1])]}) + "\n")


def read_tube_jsonl(path) -> TubePrediction:
    boxes, hs, he = [], [], []
    segment = None
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if "segment" in rec:
                segment = (int(rec["segment"][0]), int(rec["segment"][1]))
            else:
                boxes.append(rec["box"])
                hs.append(rec["hs"])
                he.append(rec["he"])
    if segment is None:
        raise ValueError("tube file has no segment trailer")
    return TubePrediction(np.asarray(boxes), np.asarray(hs), np.asarray(he),
                          segment)


_STATE_MAGIC = b"ARTS"


def _write_array(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()


def serialize_state(state: StreamState) -> bytes:
    """Snapshot a mid-stream state for exact resumption."""
    buf = io.BytesIO()
    buf.write(_STATE_MAGIC)
    buf.write(struct.pack("<HI", 1, state.cursor))
    buf.write(struct.pack("<d", state.seq_tau))
    buf.write(struct.pack("<I", state.tokens.size))
    buf.write(state.tokens.astype("<i8").tobytes())
    buf.write(state.mask.astype("<u1").tobytes())
    has_prev = state.prev_grid is not None
    buf.write(struct.pack("<B", int(has_prev)))
    if has_prev:
        _write_array(buf, state.prev_grid)
    for bank in state.banks:
        arrays = bank.state_arrays()
        buf.write(struct.pack("<B", len(arrays)))
        for arr in arrays:
            _write_array(buf, arr)
    for seq in (state.boxes, state.start_scores, state.end_scores):
        _write_array(buf, np.asarray(seq).reshape(state.cursor, -1))
    return buf.getvalue()


def restore_state(model: GroundingModel, blob: bytes) -> StreamState:
    buf = io.BytesIO(blob)
    if buf.read(4) != _STATE_MAGIC:
        raise ValueError("not a stream-state snapshot")
    version, cursor = struct.unpack("<HI", buf.read(6))
    if version != 1:
        raise ValueError(f"unsupported snapshot version {version}")
    (seq_tau,) = struct.unpack("<d", buf.read(8))
    (n_tok,) = struct.unpack("<I", buf.read(4))
    tokens = np.frombuffer(buf.read(8 * n_tok), dtype="<i8").copy()
    mask = np.frombuffer(buf.read(n_tok), dtype="<u1").astype(bool)
    (has_prev,) = struct.unpack("<B", buf.read(1))
    prev = _read_array(buf) if has_prev else None
    banks = model.fresh_banks()
    for bank in banks:
        (k,) = struct.unpack("<B", buf.read(1))
        bank.load_state_arrays([_read_array(buf) for _ in range(k)])
    boxes = _read_array(buf)
    hs = _read_array(buf).reshape(-1)
    he = _read_array(buf).reshape(-1)
    return StreamState(tokens=tokens, mask=mask, banks=banks, cursor=cursor,
                       seq_tau=seq_tau, prev_grid=prev, boxes=[b for b in boxes],
                       start_scores=[float(v) for v in hs],
                       end_scores=[float(v) for v in he])
