"""Corpus data model and on-disk formats.

Layout of a corpus directory::

    manifest.json
    videos/<video_id>/tracks.rle       candidate mask tracks
    videos/<video_id>/tokens.bin       object tokens, (N, T, D)
    videos/<video_id>/<expr_id>.emb    text embedding, stored as (1, N_w, D_text)
    videos/<video_id>/<expr_id>.gt.rle ground-truth track

Tensor blobs: ``b"SOLA"``, u32 version, u32 N, T, D, then N*T*D float32.
Track files: ``b"SOLM"``, u32 version, u32 n_tracks, u32 n_frames, then per
frame (track-major) u32 H, W, run_count and run_count u32 runs.
Everything is little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import MaskFormatError, MaskTrack, RleMask, TrackSet

FORMAT_VERSION = 1
TOKEN_MAGIC = b"SOLA"
TRACK_MAGIC = b"SOLM"
_HDR = struct.Struct("<4sIIII")


class CorpusFormatError(ValueError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class CorpusError(ValueError):
    pass


@dataclass
class TokenSet:
    values: np.ndarray  # (N, T, D) float32
    track_ids: list[str]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def subset(self, rows) -> "TokenSet":
        rows = list(rows)
        return TokenSet(self.values[rows], [self.track_ids[i] for i in rows])


@dataclass
class TextEmbedding:
    values: np.ndarray  # (N_w, D_text)
    expression_id: str
    raw_text: str = ""


@dataclass
class ExpressionRecord:
    expression_id: str
    video_id: str
    embedding: TextEmbedding
    gt_track: MaskTrack
    # generator metadata; empty for ingested data
    target_ids: tuple[str, ...] = ()
    predicate: dict = field(default_factory=dict)


@dataclass
class Video:
    video_id: str
    tracks: TrackSet
    tokens: TokenSet
    expressions: list[ExpressionRecord]
    track_kinds: list[str] = field(default_factory=list)  # "object" | "background"
    attributes: dict[str, dict] = field(default_factory=dict)  # track id -> generator attributes

    @property
    def geometry(self) -> tuple[int, int, int]:
        return self.tracks.geometry

    def object_rows(self) -> list[int]:
        kinds = self.track_kinds or ["object"] * len(self.tracks)
        return [i for i, k in enumerate(kinds) if k != "background"]


@dataclass
class Corpus:
    videos: list[Video]
    meta: dict = field(default_factory=dict)

    def pairs(self):
        for v in self.videos:
            for e in v.expressions:
                yield v, e

    @property
    def n_expressions(self) -> int:
        return sum(len(v.expressions) for v in self.videos)

    def split(self, n_first: int) -> tuple["Corpus", "Corpus"]:
        return (Corpus(self.videos[:n_first], dict(self.meta)),
                Corpus(self.videos[n_first:], dict(self.meta)))


# --- binary codecs -----------------------------------------------------------

def encode_tensor_blob(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"tensor blob needs 3 axes, got {values.shape}")
    n, t, d = values.shape
    return _HDR.pack(TOKEN_MAGIC, FORMAT_VERSION, n, t, d) + values.astype("<f4").tobytes()


def decode_tensor_blob(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < _HDR.size:
        raise CorpusFormatError(path, len(buf), "truncated header")
    magic, version, n, t, d = _HDR.unpack_from(buf, 0)
    if magic != TOKEN_MAGIC:
        raise CorpusFormatError(path, 0, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(path, 4, f"unsupported version {version}")
    want = n * t * d * 4
    have = len(buf) - _HDR.size
    if have != want:
        raise CorpusFormatError(path, _HDR.size + min(have, want),
                                f"payload is {have} bytes, header declares {want}")
    return np.frombuffer(buf, dtype="<f4", offset=_HDR.size).reshape(n, t, d).astype(np.float32)


def encode_tracks(tracks: list[MaskTrack]) -> bytes:
    n_frames = tracks[0].n_frames if tracks else 0
    parts = [_HDR.pack(TRACK_MAGIC, FORMAT_VERSION, len(tracks), n_frames, 0)]
    for tr in tracks:
        if tr.n_frames != n_frames:
            raise ValueError("all tracks in a file must share T")
        for f in tr.frames:
            parts.append(struct.pack("<III", f.height, f.width, len(f.runs)))
            parts.append(np.asarray(f.runs, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_tracks(buf: bytes, track_ids: list[str], path="<bytes>") -> list[MaskTrack]:
    if len(buf) < _HDR.size:
        raise CorpusFormatError(path, len(buf), "truncated header")
    magic, version, n, t, _ = _HDR.unpack_from(buf, 0)
    if magic != TRACK_MAGIC:
        raise CorpusFormatError(path, 0, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(path, 4, f"unsupported version {version}")
    if n != len(track_ids):
        raise CorpusFormatError(path, 8, f"file holds {n} tracks, manifest lists {len(track_ids)}")
    off = _HDR.size
    out = []
    for i in range(n):
        frames = []
        for _ in range(t):
            if off + 12 > len(buf):
                raise CorpusFormatError(path, off, "truncated frame header")
            h, w, count = struct.unpack_from("<III", buf, off)
            off += 12
            if off + 4 * count > len(buf):
                raise CorpusFormatError(path, off, f"truncated run list ({count} runs)")
            runs = np.frombuffer(buf, dtype="<u4", count=count, offset=off)
            try:
                frames.append(RleMask(h, w, tuple(runs.tolist())))
            except MaskFormatError as exc:
                raise CorpusFormatError(path, off, str(exc)) from None
            off += 4 * count
        out.append(MaskTrack(tuple(frames), track_ids[i]))
    if off != len(buf):
        raise CorpusFormatError(path, off, f"{len(buf) - off} trailing bytes")
    return out


# --- corpus IO ---------------------------------------------------------------

def _video_entry(v: Video) -> dict:
    t, h, w = v.geometry
    return {
        "video_id": v.video_id,
        "T": t, "H": h, "W": w,
        "trackset_path": f"videos/{v.video_id}/tracks.rle",
        "tokenset_path": f"videos/{v.video_id}/tokens.bin",
        "track_ids": v.tracks.track_ids,
        "token_track_ids": v.tokens.track_ids,
        "track_kinds": v.track_kinds or ["object"] * len(v.tracks),
        "attributes": v.attributes,
        "expressions": [
            {
                "expression_id": e.expression_id,
                "raw_text": e.embedding.raw_text,
                "embedding_path": f"videos/{v.video_id}/{e.expression_id}.emb",
                "gt_path": f"videos/{v.video_id}/{e.expression_id}.gt.rle",
                "target_ids": list(e.target_ids),
                "predicate": e.predicate,
            }
            for e in v.expressions
        ],
    }


def corpus_files(corpus: Corpus) -> dict[str, bytes]:
    """Every file of the corpus as relative path -> bytes."""
    files = {}
    for v in corpus.videos:
        entry = _video_entry(v)
        files[entry["trackset_path"]] = encode_tracks(list(v.tracks))
        files[entry["tokenset_path"]] = encode_tensor_blob(v.tokens.values)
        for e, ee in zip(v.expressions, entry["expressions"]):
            files[ee["embedding_path"]] = encode_tensor_blob(e.embedding.values[None])
            files[ee["gt_path"]] = encode_tracks([e.gt_track])
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": corpus.meta,
        "videos": [_video_entry(v) for v in corpus.videos],
    }
    files["manifest.json"] = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    return files


def atomic_write_dir(files: dict[str, bytes], root: str | os.PathLike) -> Path:
    """Write a directory tree to a temp sibling, then swap it into place."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}.", dir=root.parent))
    try:
        for rel, data in sorted(files.items()):
            p = tmp / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(data)
        old = None
        if root.exists():
            old = root.with_name(f".{root.name}.old-{os.getpid()}")
            os.replace(root, old)
        os.replace(tmp, root)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return root


def save_corpus(corpus: Corpus, root: str | os.PathLike) -> Path:
    return atomic_write_dir(corpus_files(corpus), root)


def _read(root: Path, rel: str) -> bytes:
    p = root / rel
    try:
        return p.read_bytes()
    except FileNotFoundError:
        raise CorpusFormatError(p, 0, "file missing") from None


def load_corpus(root: str | os.PathLike, check: bool = True) -> Corpus:
    """Read a corpus; with ``check`` any invariant violation raises CorpusError."""
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(_read(root, "manifest.json"))
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(mpath, exc.pos, f"manifest is not valid JSON: {exc.msg}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusFormatError(mpath, 0, f"unsupported format_version {manifest.get('format_version')}")
    videos = []
    for ve in manifest["videos"]:
        vid = ve["video_id"]
        tpath = ve["trackset_path"]
        tracks = decode_tracks(_read(root, tpath), ve["track_ids"], root / tpath)
        tokpath = ve["tokenset_path"]
        tokens = TokenSet(decode_tensor_blob(_read(root, tokpath), root / tokpath),
                          list(ve.get("token_track_ids", ve["track_ids"])))
        exprs = []
        for ee in ve["expressions"]:
            emb = decode_tensor_blob(_read(root, ee["embedding_path"]), root / ee["embedding_path"])
            gt = decode_tracks(_read(root, ee["gt_path"]), ["gt"], root / ee["gt_path"])[0]
            exprs.append(ExpressionRecord(
                ee["expression_id"], vid,
                TextEmbedding(emb[0], ee["expression_id"], ee.get("raw_text", "")),
                gt, tuple(ee.get("target_ids", ())), dict(ee.get("predicate", {})),
            ))
        try:
            ts = TrackSet(tracks, vid)
        except ValueError as exc:
            raise CorpusFormatError(root / tpath, 0, str(exc)) from None
        videos.append(Video(vid, ts, tokens, exprs, list(ve.get("track_kinds", [])),
                            dict(ve.get("attributes", {}))))
        declared = (ve["T"], ve["H"], ve["W"])
        if ts.tracks and ts.geometry != declared:
            raise CorpusFormatError(root / tpath, 0, f"geometry {ts.geometry} != manifest {declared}")
    corpus = Corpus(videos, manifest.get("meta", {}))
    if check:
        problems = validate(corpus)
        if problems:
            raise CorpusError(f"{root}: " + "; ".join(problems))
    return corpus


def validate(corpus: Corpus) -> list[str]:
    """Invariant violations, each naming the entity and the rule; [] if clean."""
    out = []
    vids = [v.video_id for v in corpus.videos]
    for dup in sorted({v for v in vids if vids.count(v) > 1}):
        out.append(f"video {dup}: duplicate video id")
    eids = [e.expression_id for _, e in corpus.pairs()]
    for dup in sorted({e for e in eids if eids.count(e) > 1}):
        out.append(f"expression {dup}: duplicate expression id")
    for v in corpus.videos:
        n_tracks = len(v.tracks)
        vals = v.tokens.values
        if n_tracks == 0:
            out.append(f"video {v.video_id}: empty TrackSet")
            continue
        if vals.ndim != 3 or 0 in vals.shape:
            out.append(f"video {v.video_id}: TokenSet must be N x T x D with N, T, D >= 1")
            continue
        n, t, _ = vals.shape
        if n != n_tracks:
            out.append(f"video {v.video_id}: TokenSet has N={n} but TrackSet has N={n_tracks}")
        if t != v.geometry[0]:
            out.append(f"video {v.video_id}: TokenSet has T={t} but tracks have T={v.geometry[0]}")
        if list(v.tokens.track_ids) != v.tracks.track_ids:
            out.append(f"video {v.video_id}: token track_ids do not match TrackSet order")
        bad = np.argwhere(~np.isfinite(vals).all(axis=-1))
        for i, f in bad:
            name = v.tokens.track_ids[i] if i < len(v.tokens.track_ids) else str(i)
            out.append(f"video {v.video_id}: non-finite token value at track {name} frame {f}")
        if v.track_kinds and len(v.track_kinds) != n_tracks:
            out.append(f"video {v.video_id}: track_kinds length {len(v.track_kinds)} != {n_tracks}")
        for e in v.expressions:
            emb = e.embedding.values
            if emb.ndim != 2 or emb.shape[0] < 1:
                out.append(f"expression {e.expression_id}: embedding needs N_w >= 1")
            elif not np.isfinite(emb).all():
                out.append(f"expression {e.expression_id}: non-finite embedding value")
            if e.gt_track.geometry != v.geometry:
                out.append(f"expression {e.expression_id}: gt geometry {e.gt_track.geometry} != video {v.geometry}")
            missing = set(e.target_ids) - set(v.tracks.track_ids)
            if missing:
                out.append(f"expression {e.expression_id}: unknown target ids {sorted(missing)}")
    return out


def directory_digest(root: str | os.PathLike) -> str:
    """sha256 over relative paths and contents of every file under root."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
