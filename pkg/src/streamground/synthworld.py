"""Synthetic long-form episodes: scripted scenes standing in for real video.

An episode is a sequence of low-resolution feature grids containing a cast of
persistent actors plus unscripted "mover" noise objects. A script assigns
non-overlapping events, each an (actor, action) pair active over a frame
span; during its event an actor translates along an action-specific bounce
trajectory (with short pause phases), otherwise it idles at its home
position. Exactly one event matches the two-word query (actor word, action
word); that event's span and the actor's per-frame boxes are the ground
truth.

Why this construction:

* actor identity lives in appearance (per-word signature patterns plus a
  per-episode instance pattern, so two actors may share a word yet remain
  trackable only through temporal context);
* actions live in motion (direction/speed patterns + fixed durations), so
  per-frame features cannot reveal how long an event has been running;
* movers keep global motion noisy at all times, so pooling motion at the
  predicted box genuinely isolates the target.

Generation is pure given (config, seed).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD_TOKEN = "<pad>"
FUNCTION_WORDS = ("the", "person", "doing")

_SIGNATURE_ROOT = 0x51673A11  # fixed entropy for global per-word signatures


class WorldConfigError(ValueError):
    """Invalid world configuration."""


@dataclass(frozen=True)
class WorldConfig:
    height: int = 8
    width: int = 8
    c_raw: int = 8
    n_frames: int = 32
    n_events: int = 2
    n_actor_words: int = 6
    n_action_words: int = 4
    n_actors: int = 4
    ambiguous_actor: bool = True      # add an idle twin sharing the query actor word
    n_movers: int = 2
    event_gap_min: int = 2
    base_duration: int = 6
    duration_per_action: int = 2
    actor_width: float = 0.22
    actor_height: float = 0.22
    bounce_radius: float = 0.16
    action_speed: float = 0.07
    action_speed_per_id: float = 0.01
    move_frames: int = 3              # action cycle: move_frames moving, pause_frames still
    pause_frames: int = 1
    mover_speed: float = 0.09
    max_step: float = 0.14            # continuity cap on per-frame target displacement
    signature_scale: float = 1.0
    instance_signature_scale: float = 0.35
    mover_scale: float = 0.7
    noise_scale: float = 0.0

    def validate(self) -> None:
        if self.n_frames < 4:
            raise WorldConfigError("n_frames must be >= 4")
        if self.n_events < 1:
            raise WorldConfigError("need at least one scripted event")
        if self.n_actors < 1:
            raise WorldConfigError("need at least one actor")
        if self.n_actor_words < 1 or self.n_action_words < 1:
            raise WorldConfigError("vocabulary must contain actor and action words")
        if self.n_actors > self.n_actor_words + 1:
            raise WorldConfigError("not enough actor words for the cast")
        total = sum(self.event_duration(a % self.n_action_words)
                    for a in range(self.n_events))
        if total + (self.n_events - 1) * self.event_gap_min > self.n_frames:
            raise WorldConfigError(
                f"{self.n_events} events do not fit in {self.n_frames} frames")

    def event_duration(self, action_id: int) -> int:
        return self.base_duration + self.duration_per_action * action_id


@dataclass(frozen=True)
class Vocabulary:
    """Token list: PAD, function words, actor words, action words."""

    tokens: tuple[str, ...]
    n_actor_words: int
    n_action_words: int

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def size(self) -> int:
        return len(self.tokens)

    def actor_token(self, word_id: int) -> int:
        return 1 + len(FUNCTION_WORDS) + word_id

    def action_token(self, action_id: int) -> int:
        return 1 + len(FUNCTION_WORDS) + self.n_actor_words + action_id

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.pad_id:
                continue
            if i < 0 or i >= len(self.tokens):
                raise KeyError(f"token id {i} out of range")
            out.append(self.tokens[i])
        return out


def build_vocabulary(n_actor_words: int, n_action_words: int) -> Vocabulary:
    tokens = (PAD_TOKEN, *FUNCTION_WORDS,
              *(f"actor{i}" for i in range(n_actor_words)),
              *(f"act{j}" for j in range(n_action_words)))
    return Vocabulary(tokens, n_actor_words, n_action_words)


@dataclass
class EventSpan:
    event_id: int
    start: int
    end: int        # inclusive
    actor_id: int
    action_id: int


@dataclass
class ActorInfo:
    word_id: int
    home: tuple[float, float]


@dataclass
class FrameGrid:
    grid: np.ndarray                      # (H, W, C_raw)
    objects: list[tuple[int, np.ndarray, int]]  # (actor_id, box cxcywh, action_id)


@dataclass
class SyntheticEpisode:
    frames: list[FrameGrid]
    query_tokens: list[int]
    gt_boxes: np.ndarray                  # (T, 4), zeros outside gt_segment
    gt_segment: tuple[int, int]           # inclusive
    event_script: list[EventSpan]
    actors: list[ActorInfo]
    n_actor_words: int
    n_action_words: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.frames[0].grid.shape

    def vocabulary(self) -> Vocabulary:
        return build_vocabulary(self.n_actor_words, self.n_action_words)


# ---------------------------------------------------------------------------
# signatures and stamping
# ---------------------------------------------------------------------------

def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def actor_word_signature(word_id: int, c_raw: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([_SIGNATURE_ROOT, 1, word_id, c_raw])))
    return _unit_vector(rng, c_raw)


def mover_signature(index: int, c_raw: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([_SIGNATURE_ROOT, 2, index, c_raw])))
    return _unit_vector(rng, c_raw)


def box_cell_weights(box: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-cell coverage fraction of a (cx, cy, w, h) box, shape (H, W)."""
    cx, cy, bw, bh = box
    x1, x2 = cx - bw / 2.0, cx + bw / 2.0
    y1, y2 = cy - bh / 2.0, cy + bh / 2.0
    xs = np.arange(w + 1) / w
    ys = np.arange(h + 1) / h
    ox = np.clip(np.minimum(x2, xs[1:]) - np.maximum(x1, xs[:-1]), 0.0, None)
    oy = np.clip(np.minimum(y2, ys[1:]) - np.maximum(y1, ys[:-1]), 0.0, None)
    return np.outer(oy, ox) * (h * w)


# ---------------------------------------------------------------------------
# episode generation
# ---------------------------------------------------------------------------

def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def _place_events(cfg: WorldConfig, durations: list[int],
                  rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping ordered spans with gaps >= event_gap_min."""
    n = len(durations)
    occupied = sum(durations) + (n - 1) * cfg.event_gap_min
    slack = cfg.n_frames - occupied
    # distribute slack over the n leading gaps (leftover trails the last event)
    if slack > 0:
        bars = np.sort(rng.integers(0, slack + 1, size=n))
        extra = np.diff(np.concatenate([[0], bars]))
    else:
        extra = np.zeros(n, dtype=int)
    spans = []
    cursor = 0
    for j, d in enumerate(durations):
        cursor += int(extra[j]) + (cfg.event_gap_min if j > 0 else 0)
        spans.append((cursor, cursor + d - 1))
        cursor += d
    return spans


def _action_offset(cfg: WorldConfig, action_id: int, step: int) -> tuple[float, float]:
    """Displacement from home after `step` frames of action `action_id`."""
    theta = 2.0 * np.pi * action_id / max(cfg.n_action_words, 1)
    speed = cfg.action_speed + cfg.action_speed_per_id * action_id
    cycle = cfg.move_frames + cfg.pause_frames
    # distance walked: pauses freeze, movement bounces in [-r, r] along theta;
    # the first event frame is already displaced so motion shows immediately
    moved = 0
    for s in range(step + 1):
        if s % cycle < cfg.move_frames:
            moved += 1
    dist = moved * speed
    r = cfg.bounce_radius
    # triangle-wave fold into [-r, r]
    if r <= 0:
        folded = 0.0
    else:
        period = 4.0 * r
        ph = dist % period
        if ph < r:
            folded = ph
        elif ph < 3.0 * r:
            folded = 2.0 * r - ph
        else:
            folded = ph - 4.0 * r
    return folded * np.cos(theta), folded * np.sin(theta)


def generate_episode(cfg: WorldConfig, seed) -> SyntheticEpisode:
    """Build one scripted episode; deterministic given (cfg, seed)."""
    cfg.validate()
    rng = _as_generator(seed)
    vocab = build_vocabulary(cfg.n_actor_words, cfg.n_action_words)

    query_actor = int(rng.integers(cfg.n_actor_words))
    query_action = int(rng.integers(cfg.n_action_words))

    # cast: actor 0 is the target; optional idle twin shares the word
    words = [query_actor]
    if cfg.ambiguous_actor and cfg.n_actors >= 2:
        words.append(query_actor)
    others = [w for w in range(cfg.n_actor_words) if w != query_actor]
    rng.shuffle(others)
    while len(words) < cfg.n_actors:
        words.append(others[(len(words) - 1) % len(others)])

    margin = max(cfg.actor_width, cfg.actor_height) / 2.0 + cfg.bounce_radius + 0.02
    lo, hi = margin, 1.0 - margin
    slots = []
    grid_n = max(2, int(np.ceil(np.sqrt(cfg.n_actors + cfg.n_movers))))
    for iy in range(grid_n):
        for ix in range(grid_n):
            slots.append((lo + (hi - lo) * ix / max(grid_n - 1, 1),
                          lo + (hi - lo) * iy / max(grid_n - 1, 1)))
    order = rng.permutation(len(slots))
    homes = [slots[order[i]] for i in range(cfg.n_actors + cfg.n_movers)]
    actors = [ActorInfo(word_id=w, home=homes[i]) for i, w in enumerate(words)]

    # script: one matching event, distractors share at most one query word
    match_slot = int(rng.integers(cfg.n_events))
    twin_id = 1 if (cfg.ambiguous_actor and cfg.n_actors >= 2) else None
    events: list[tuple[int, int]] = []  # (actor_id, action_id)
    for j in range(cfg.n_events):
        if j == match_slot:
            events.append((0, query_action))
            continue
        kind = int(rng.integers(3))
        if kind == 0:  # share the actor word, different action
            actor = twin_id if twin_id is not None else 0
            choices = [a for a in range(cfg.n_action_words) if a != query_action]
            action = int(rng.choice(choices)) if choices else query_action
            if action == query_action:  # single-action vocab: fall through to neither
                kind = 2
            else:
                events.append((actor, action))
                continue
        candidates = [i for i, a in enumerate(actors) if a.word_id != query_actor]
        if kind == 1 and candidates:  # share the action word, different actor
            events.append((int(rng.choice(candidates)), query_action))
            continue
        if candidates:  # share neither
            choices = [a for a in range(cfg.n_action_words) if a != query_action]
            action = int(rng.choice(choices)) if choices else query_action
            if action != query_action:
                events.append((int(rng.choice(candidates)), action))
                continue
        # degenerate casts: repeat the matching pair is forbidden, so idle twin
        choices = [a for a in range(cfg.n_action_words) if a != query_action]
        if not choices or twin_id is None:
            raise WorldConfigError(
                "cannot build a non-matching distractor event; enlarge the vocabulary")
        events.append((twin_id, int(rng.choice(choices))))

    durations = [cfg.event_duration(a) for (_, a) in events]
    spans = _place_events(cfg, durations, rng)
    script = [EventSpan(j, s, e, actor_id, action_id)
              for j, ((actor_id, action_id), (s, e)) in enumerate(zip(events, spans))]
    gt_span = spans[match_slot]

    # per-episode instance patterns (consistent within the episode only)
    inst = [cfg.instance_signature_scale * _unit_vector(rng, cfg.c_raw)
            for _ in range(cfg.n_actors)]
    signatures = [cfg.signature_scale * actor_word_signature(a.word_id, cfg.c_raw)
                  + inst[i] for i, a in enumerate(actors)]
    mover_sigs = [cfg.mover_scale * mover_signature(m, cfg.c_raw)
                  for m in range(cfg.n_movers)]

    active: dict[int, EventSpan] = {}
    for ev in script:
        for t in range(ev.start, ev.end + 1):
            active[t] = ev

    mover_pos = [np.array(homes[cfg.n_actors + m]) for m in range(cfg.n_movers)]
    mmargin = cfg.actor_width / 2.0 + 0.01

    frames: list[FrameGrid] = []
    gt_boxes = np.zeros((cfg.n_frames, 4))
    for t in range(cfg.n_frames):
        grid = np.zeros((cfg.height, cfg.width, cfg.c_raw))
        objects: list[tuple[int, np.ndarray, int]] = []
        ev = active.get(t)
        for i, actor in enumerate(actors):
            x, y = actor.home
            action = -1
            if ev is not None and ev.actor_id == i:
                dx, dy = _action_offset(cfg, ev.action_id, t - ev.start)
                x, y = x + dx, y + dy
                action = ev.action_id
            box = np.array([x, y, cfg.actor_width, cfg.actor_height])
            grid += box_cell_weights(box, cfg.height, cfg.width)[:, :, None] * signatures[i]
            objects.append((i, box, action))
            if ev is not None and ev.actor_id == i and ev.event_id == match_slot:
                gt_boxes[t] = box
        for m in range(cfg.n_movers):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            step = cfg.mover_speed * np.array([np.cos(ang), np.sin(ang)])
            mover_pos[m] = np.clip(mover_pos[m] + step, mmargin, 1.0 - mmargin)
            box = np.array([mover_pos[m][0], mover_pos[m][1],
                            cfg.actor_width, cfg.actor_height])
            grid += box_cell_weights(box, cfg.height, cfg.width)[:, :, None] * mover_sigs[m]
            objects.append((-(m + 1), box, -1))
        if cfg.noise_scale > 0.0:
            grid += cfg.noise_scale * rng.standard_normal(grid.shape)
        frames.append(FrameGrid(grid=grid, objects=objects))

    query_tokens = [vocab.actor_token(query_actor), vocab.action_token(query_action)]
    return SyntheticEpisode(
        frames=frames,
        query_tokens=query_tokens,
        gt_boxes=gt_boxes,
        gt_segment=gt_span,
        event_script=script,
        actors=actors,
        n_actor_words=cfg.n_actor_words,
        n_action_words=cfg.n_action_words,
    )


def render_frame_features(episode: SyntheticEpisode, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw appearance and motion grids for frame i.

    Motion is the cellwise difference grid(i) - grid(i-1); frame 0 reuses
    itself as the previous frame, so its motion grid is zero.
    """
    if i < 0 or i >= episode.n_frames:
        raise IndexError(f"frame {i} out of range [0, {episode.n_frames})")
    appearance = episode.frames[i].grid
    prev = episode.frames[i - 1].grid if i > 0 else appearance
    return appearance, appearance - prev


def encode_query_tokens(episode: SyntheticEpisode, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad the query token ids to length n_t; mask marks real tokens."""
    vocab = episode.vocabulary()
    ids = list(episode.query_tokens)
    if len(ids) > n_t:
        raise ValueError(f"query of {len(ids)} tokens exceeds n_t={n_t}")
    for i in ids:
        if i < 0 or i >= vocab.size or i == vocab.pad_id:
            raise KeyError(f"unknown token id {i}")
    padded = np.full(n_t, vocab.pad_id, dtype=np.int64)
    padded[:len(ids)] = ids
    mask = np.zeros(n_t, dtype=bool)
    mask[:len(ids)] = True
    return padded, mask


# ---------------------------------------------------------------------------
# dataset files (.artge)
# ---------------------------------------------------------------------------

MAGIC = b"ARTG"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Corrupt or unsupported episode dataset file."""


def _write_record(buf: io.BufferedIOBase, ep: SyntheticEpisode) -> None:
    h, w, c_raw = ep.grid_shape
    buf.write(struct.pack("<IHHH", ep.n_frames, h, w, c_raw))
    buf.write(struct.pack("<ii", ep.gt_segment[0], ep.gt_segment[1]))
    buf.write(struct.pack("<H", len(ep.query_tokens)))
    buf.write(struct.pack(f"<{len(ep.query_tokens)}i", *ep.query_tokens))
    buf.write(struct.pack("<H", len(ep.event_script)))
    for ev in ep.event_script:
        buf.write(struct.pack("<iiiii", ev.event_id, ev.start, ev.end,
                              ev.actor_id, ev.action_id))
    buf.write(struct.pack("<H", len(ep.actors)))
    for a in ep.actors:
        buf.write(struct.pack("<idd", a.word_id, a.home[0], a.home[1]))
    buf.write(np.ascontiguousarray(ep.gt_boxes, dtype="<f8").tobytes())
    for fr in ep.frames:
        buf.write(np.ascontiguousarray(fr.grid, dtype="<f8").tobytes())
        buf.write(struct.pack("<H", len(fr.objects)))
        for actor_id, box, action_id in fr.objects:
            buf.write(struct.pack("<ii", actor_id, action_id))
            buf.write(np.ascontiguousarray(box, dtype="<f8").tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise DatasetFormatError("truncated dataset file")
    return data


def _read_record(buf: io.BufferedIOBase, n_actor_words: int,
                 n_action_words: int) -> SyntheticEpisode:
    n_frames, h, w, c_raw = struct.unpack("<IHHH", _read_exact(buf, 10))
    gt_s, gt_e = struct.unpack("<ii", _read_exact(buf, 8))
    (n_q,) = struct.unpack("<H", _read_exact(buf, 2))
    query = list(struct.unpack(f"<{n_q}i", _read_exact(buf, 4 * n_q)))
    (n_ev,) = struct.unpack("<H", _read_exact(buf, 2))
    script = []
    for _ in range(n_ev):
        vals = struct.unpack("<iiiii", _read_exact(buf, 20))
        script.append(EventSpan(*vals))
    (n_actors,) = struct.unpack("<H", _read_exact(buf, 2))
    actors = []
    for _ in range(n_actors):
        word_id, hx, hy = struct.unpack("<idd", _read_exact(buf, 20))
        actors.append(ActorInfo(word_id=word_id, home=(hx, hy)))
    gt_boxes = np.frombuffer(_read_exact(buf, 8 * n_frames * 4),
                             dtype="<f8").reshape(n_frames, 4).copy()
    frames = []
    for _ in range(n_frames):
        grid = np.frombuffer(_read_exact(buf, 8 * h * w * c_raw),
                             dtype="<f8").reshape(h, w, c_raw).copy()
        (n_obj,) = struct.unpack("<H", _read_exact(buf, 2))
        objects = []
        for _ in range(n_obj):
            actor_id, action_id = struct.unpack("<ii", _read_exact(buf, 8))
            box = np.frombuffer(_read_exact(buf, 32), dtype="<f8").copy()
            objects.append((actor_id, box, action_id))
        frames.append(FrameGrid(grid=grid, objects=objects))
    return SyntheticEpisode(
        frames=frames, query_tokens=query, gt_boxes=gt_boxes,
        gt_segment=(gt_s, gt_e), event_script=script, actors=actors,
        n_actor_words=n_actor_words, n_action_words=n_action_words)


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def write_dataset(path, episodes: list[SyntheticEpisode]) -> None:
    """Write episodes to an .artge container plus its offset manifest."""
    if not episodes:
        raise ValueError("refusing to write an empty dataset")
    path = Path(path)
    offsets = []
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHHI", FORMAT_VERSION,
                            episodes[0].n_actor_words,
                            episodes[0].n_action_words,
                            len(episodes)))
        for ep in episodes:
            offsets.append(f.tell())
            _write_record(f, ep)
    with open(manifest_path(path), "w") as m:
        for off in offsets:
            m.write(f"{off}\n")


def read_dataset(path) -> list[SyntheticEpisode]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        version, n_actor_words, n_action_words, n_records = struct.unpack(
            "<HHHI", _read_exact(f, 10))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        return [_read_record(f, n_actor_words, n_action_words)
                for _ in range(n_records)]


def read_manifest(path) -> list[int]:
    with open(manifest_path(path)) as m:
        return [int(line) for line in m if line.strip()]


def read_episode_at(path, offset: int, n_actor_words: int,
                    n_action_words: int) -> SyntheticEpisode:
    with open(path, "rb") as f:
        f.seek(offset)
        return _read_record(f, n_actor_words, n_action_words)


def episode_bytes(ep: SyntheticEpisode) -> bytes:
    """Canonical serialized form, handy for identity comparisons."""
    buf = io.BytesIO()
    _write_record(buf, ep)
    return buf.getvalue()
