"""ONNX adapter for learned feature extractors and matchers.

The adapter is the enforcement point for the FeatureSet and MatchSet
contracts: whatever the model emits, keypoints come out clipped to the
image, descriptors unit-norm and matches one-to-one. ``onnxruntime`` is an
optional dependency and is imported only when a model is actually loaded.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DeviceUnavailable, InferenceBackendFailure, ModelFileUnreadable, SignatureMismatch
from .frontend import DESCRIPTOR_DIM, Extractor, ExtractorConfig, FeatureSet, normalize_keypoints
from .matcher import DEFAULT_MIN_CONFIDENCE, Matcher, MatchSet, enforce_one_to_one

log = logging.getLogger(__name__)

MODEL_ROOT_ENV = "SELMVO_MODEL_ROOT"

# (input count, output count, rank of first input)
SIGNATURES = {
    "extractor": (1, 3, 4),
    "matcher": (4, 2, None),
}


@dataclass
class ModelHandle:
    model_path: Path
    kind: str
    input_spec: list  # [(name, shape)], symbolic dims as strings
    output_spec: list
    device: str
    sha256: str
    session: object = field(repr=False, default=None)
    lock: threading.Lock = field(repr=False, default_factory=threading.Lock)

    @property
    def descriptor_dim(self):
        """Descriptor length declared by the model, or None if symbolic."""
        if self.kind == "extractor":
            shape = self.output_spec[2][1]
        else:
            shape = self.input_spec[1][1]
        last = shape[-1] if shape else None
        return last if isinstance(last, int) else None

    def metadata(self):
        return {"path": str(self.model_path), "kind": self.kind, "sha256": self.sha256,
                "device": self.device}


def resolve_model_path(path):
    """Relative model paths are looked up under ``$SELMVO_MODEL_ROOT`` first."""
    p = Path(path)
    root = os.environ.get(MODEL_ROOT_ENV)
    if not p.is_absolute() and root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _import_ort():
    try:
        import onnxruntime
    except ImportError as e:
        raise InferenceBackendFailure("onnxruntime is not installed "
                                      "(pip install selmvo[onnx])") from e
    return onnxruntime


def _spec(args):
    return [(a.name, list(a.shape) if a.shape is not None else []) for a in args]


def _check_signature(kind, inputs, outputs):
    if kind not in SIGNATURES:
        raise ValueError(f"unknown model kind {kind!r}")
    n_in, n_out, rank = SIGNATURES[kind]
    found = (len(inputs), len(outputs), len(inputs[0][1]) if inputs else 0)
    expected = (n_in, n_out, rank if rank is not None else found[2])
    if found != expected:
        raise SignatureMismatch(
            f"{kind}: {n_in} inputs / {n_out} outputs" + (f", rank-{rank} image" if rank else ""),
            f"{found[0]} inputs / {found[1]} outputs, first input rank {found[2]}")


def load_model(path, kind, device="cpu") -> ModelHandle:
    """Open an ONNX model and validate its tensor signature against ``kind``."""
    path = resolve_model_path(path)
    if not path.is_file() or not os.access(path, os.R_OK):
        raise ModelFileUnreadable(f"cannot read model file {path}")
    ort = _import_ort()
    providers = ["CPUExecutionProvider"]
    if device == "gpu":
        if "CUDAExecutionProvider" in ort.get_available_providers():
            providers = ["CUDAExecutionProvider", "CPUExecutionProvider"]
        else:
            warnings.warn("gpu requested but unavailable, running on cpu", DeviceUnavailable,
                          stacklevel=2)
            device = "cpu"
    elif device != "cpu":
        raise ValueError(f"unknown device {device!r}")
    opts = ort.SessionOptions()
    opts.intra_op_num_threads = 1
    opts.inter_op_num_threads = 1
    opts.execution_mode = ort.ExecutionMode.ORT_SEQUENTIAL
    try:
        session = ort.InferenceSession(str(path), sess_options=opts, providers=providers)
    except Exception as e:  # onnxruntime raises its own exception hierarchy
        raise ModelFileUnreadable(f"{path} is not a loadable ONNX model: {e}") from e
    inputs, outputs = _spec(session.get_inputs()), _spec(session.get_outputs())
    _check_signature(kind, inputs, outputs)
    return ModelHandle(path, kind, inputs, outputs, device, file_sha256(path), session)


def _run(h: ModelHandle, feeds):
    with h.lock:
        try:
            return h.session.run(None, feeds)
        except Exception as e:
            raise InferenceBackendFailure(str(e)) from e


def _unbatch(a, rank):
    a = np.asarray(a)
    while a.ndim > rank and a.shape[0] == 1:
        a = a[0]
    return a


def run_extractor(h: ModelHandle, image, cfg: Optional[ExtractorConfig] = None) -> FeatureSet:
    """Run an extractor model on a grayscale image and sanitize its output."""
    if h.kind != "extractor":
        raise SignatureMismatch("extractor", h.kind)
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("run_extractor expects a grayscale image")
    hgt, wid = img.shape
    x = (img.astype(np.float32) / 255.0)[None, None]
    kp, sc, de = _run(h, {h.input_spec[0][0]: x})
    kp = _unbatch(kp, 2).astype(np.float64).reshape(-1, 2)
    sc = _unbatch(sc, 1).astype(np.float64).reshape(-1)
    de = _unbatch(de, 2).astype(np.float64)
    if len(sc) != len(kp) or len(de) != len(kp):
        raise InferenceBackendFailure(f"output lengths differ: {len(kp)}, {len(sc)}, {len(de)}")
    de = de.reshape(len(kp), -1)
    norms = np.linalg.norm(de, axis=1)
    keep = np.isfinite(kp).all(1) & np.isfinite(sc) & np.isfinite(de).all(1) & (norms > 0)
    if cfg is not None:
        keep &= sc >= cfg.score_threshold
    kp, sc, de, norms = kp[keep], sc[keep], de[keep], norms[keep]
    if cfg is not None and len(sc) > cfg.max_features:
        order = np.argsort(-sc, kind="stable")[:cfg.max_features]
        order.sort()
        kp, sc, de, norms = kp[order], sc[order], de[order], norms[order]
    kp[:, 0] = np.clip(kp[:, 0], 0, wid - 1)
    kp[:, 1] = np.clip(kp[:, 1], 0, hgt - 1)
    fs = FeatureSet(kp, np.clip(sc, 0.0, 1.0), de / norms[:, None], (wid, hgt))
    return fs.validate()


def run_matcher(h: ModelHandle, fs_a: FeatureSet, fs_b: FeatureSet,
                min_confidence=0.0) -> MatchSet:
    """Run a matcher model on two feature sets; output is one-to-one."""
    if h.kind != "matcher":
        raise SignatureMismatch("matcher", h.kind)
    if len(fs_a) == 0 or len(fs_b) == 0:
        return MatchSet.empty()
    tensors = [normalize_keypoints(fs_a), fs_a.descriptors,
               normalize_keypoints(fs_b), fs_b.descriptors]
    feeds = {}
    for (name, shape), t in zip(h.input_spec, tensors):
        t = t.astype(np.float32)
        while t.ndim < len(shape):
            t = t[None]
        feeds[name] = t
    pairs, scores = _run(h, feeds)
    pairs = _unbatch(pairs, 2).astype(np.int64).reshape(-1, 2)
    scores = _unbatch(scores, 1).astype(np.float64).reshape(-1)
    if len(pairs) != len(scores):
        raise InferenceBackendFailure(f"{len(pairs)} pairs but {len(scores)} scores")
    ok = ((pairs[:, 0] >= 0) & (pairs[:, 0] < len(fs_a)) & (pairs[:, 1] >= 0)
          & (pairs[:, 1] < len(fs_b)) & np.isfinite(scores) & (scores >= min_confidence))
    if not ok.all():
        log.debug("dropping %d invalid matcher outputs", int((~ok).sum()))
    return enforce_one_to_one(pairs[ok], scores[ok]).validate(len(fs_a), len(fs_b))


class LearnedExtractor(Extractor):
    name = "onnx"

    def __init__(self, handle: ModelHandle, cfg: Optional[ExtractorConfig] = None):
        if handle.kind != "extractor":
            raise SignatureMismatch("extractor", handle.kind)
        dim = handle.descriptor_dim
        if dim is not None and dim != DESCRIPTOR_DIM:
            log.warning("model descriptor dimension %d (builtin path uses %d)", dim, DESCRIPTOR_DIM)
        self.handle = handle
        self.cfg = cfg or ExtractorConfig()

    def extract(self, image):
        return run_extractor(self.handle, image, self.cfg)


class LearnedMatcher(Matcher):
    name = "onnx"

    def __init__(self, handle: ModelHandle, min_confidence=DEFAULT_MIN_CONFIDENCE):
        if handle.kind != "matcher":
            raise SignatureMismatch("matcher", handle.kind)
        self.handle = handle
        self.min_confidence = min_confidence

    def match(self, fs_a, fs_b, min_confidence=None):
        mc = self.min_confidence if min_confidence is None else min_confidence
        return run_matcher(self.handle, fs_a, fs_b, mc)
