"""Utility oracles and synthetic concept data.

An oracle is any object with ``evaluate(query: UtilityQuery) -> UtilityResult``.
Two are provided: :class:`LandscapeOracle`, a closed-form synthetic utility
surface over (layer, coefficient), and :class:`ExternalEvaluator`, which talks
line-delimited JSON to a child process.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import struct
import subprocess
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import EvaluatorDiedError, EvaluatorTimeoutError, ProtocolError, ValidationError
from .store import ConceptDataset, DiffTensor, Variant

log = logging.getLogger(__name__)

COHERENCE_SLOPE = 30.0


@dataclass(frozen=True)
class UtilityQuery:
    concept: str
    model: str
    vector_path: str
    layer: int
    coefficient: float
    seed: int

    def to_wire(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UtilityResult:
    concept_score: float
    coherence: float
    utility: float

    @classmethod
    def from_scores(cls, concept_score: float, coherence: float) -> UtilityResult:
        for name, val in (("concept_score", concept_score), ("coherence", coherence)):
            if not (0.0 <= val <= 100.0):
                raise ValueError(f"{name}={val} outside [0, 100]")
        return cls(float(concept_score), float(coherence), (concept_score + coherence) / 2.0)


class Oracle(Protocol):
    def evaluate(self, query: UtilityQuery) -> UtilityResult: ...


def _u64(x: int) -> int:
    return int(x) & 0xFFFF_FFFF_FFFF_FFFF


def _float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(x)))[0]


@dataclass(frozen=True)
class LandscapeConfig:
    peak_layer: int
    peak_coefficient: float
    peak_utility: float = 90.0
    width_layer: float = 4.0
    width_coefficient: float = 1.0
    base_utility: float = 0.0
    collapse_coefficient: float = 3.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width_layer <= 0 or self.width_coefficient <= 0:
            raise ValidationError("landscape widths must be positive")
        if not (0.0 < self.peak_utility <= 100.0):
            raise ValidationError("peak_utility must lie in (0, 100]")
        if self.base_utility < 0 or self.base_utility > self.peak_utility:
            raise ValidationError("base_utility must lie in [0, peak_utility]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> LandscapeConfig:
        return cls(**d)


def synth_landscape_evaluate(config: LandscapeConfig, query: UtilityQuery) -> UtilityResult:
    z = (query.layer - config.peak_layer) ** 2 / (2 * config.width_layer**2) + (
        query.coefficient - config.peak_coefficient
    ) ** 2 / (2 * config.width_coefficient**2)
    concept = config.base_utility + (config.peak_utility - config.base_utility) * math.exp(-z)
    coherence = 100.0 - COHERENCE_SLOPE * max(0.0, query.coefficient - config.collapse_coefficient)
    if config.noise_sigma > 0:
        rng = np.random.default_rng(
            [_u64(config.seed), _u64(query.seed), _u64(query.layer), _float_bits(query.coefficient)]
        )
        concept += config.noise_sigma * rng.standard_normal()
        coherence += config.noise_sigma * rng.standard_normal()
    concept = min(100.0, max(0.0, concept))
    coherence = min(100.0, max(0.0, coherence))
    return UtilityResult.from_scores(concept, coherence)


@dataclass
class LandscapeOracle:
    config: LandscapeConfig
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def evaluate(self, query: UtilityQuery) -> UtilityResult:
        with self._lock:
            self.calls += 1
        return synth_landscape_evaluate(self.config, query)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_layers: int = 32
    n_prompts: int = 5
    n_questions: int = 100
    dim: int = 64
    sigma_question: float = 0.1
    sigma_prompt: float = 0.05
    magnitude_mu: float = 0.0
    magnitude_sigma: float = 0.3
    # per-layer scale in (0, 1]; None draws one from the seed
    alignment_envelope: tuple[float, ...] | None = None
    # draw the prompt-boundary envelope independently of the response one
    fragmented: bool = False
    envelope_low: float = 0.25
    # prompts whose directions follow an unrelated global direction
    outlier_prompts: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValidationError("synthetic dimension must be >= 2")
        if min(self.n_layers, self.n_prompts, self.n_questions) < 1:
            raise ValidationError("synthetic counts must be >= 1")
        if self.sigma_question < 0 or self.sigma_prompt < 0 or self.magnitude_sigma < 0:
            raise ValidationError("dispersions must be nonnegative")
        if not (0.0 < self.envelope_low <= 1.0):
            raise ValidationError("envelope_low must lie in (0, 1]")
        if self.alignment_envelope is not None:
            env = self.alignment_envelope
            if len(env) != self.n_layers or not all(0.0 < e <= 1.0 for e in env):
                raise ValidationError("alignment_envelope needs n_layers values in (0, 1]")
        if any(not 0 <= p < self.n_prompts for p in self.outlier_prompts):
            raise ValidationError("outlier prompt index out of range")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        d = dict(d)
        for key in ("alignment_envelope", "outlier_prompts"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("alignment_envelope", "outlier_prompts"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_envelopes(config: SynthConfig) -> dict[Variant, np.ndarray]:
    """Per-variant alignment envelopes used by :func:`generate_concept`."""
    env_seq, pb_seq = np.random.SeedSequence([_u64(config.seed), 1]).spawn(2)

    def draw(seq: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(seq)
        return rng.uniform(config.envelope_low, 1.0, size=config.n_layers)

    if config.alignment_envelope is not None:
        ra = np.asarray(config.alignment_envelope, dtype=np.float64)
    else:
        ra = draw(env_seq)
    pb = draw(pb_seq) if config.fragmented else ra
    return {Variant.RESPONSE_AVG: ra, Variant.PROMPT_BOUNDARY: pb}


def _generate_variant(config: SynthConfig, envelope: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L, P, Q, D = config.n_layers, config.n_prompts, config.n_questions, config.dim
    sigma_q = (config.sigma_question / envelope)[:, None, None]  # (L, 1, 1)

    g = _unit_rows(rng.standard_normal((L, D)))
    u = _unit_rows(g[:, None, :] + sigma_q * rng.standard_normal((L, Q, D)))  # (L, Q, D)
    centers = np.broadcast_to(u[:, None], (L, P, Q, D)).copy()
    if config.outlier_prompts:
        h = _unit_rows(rng.standard_normal((L, D)))
        u_out = _unit_rows(h[:, None, :] + sigma_q * rng.standard_normal((L, Q, D)))
        for p in config.outlier_prompts:
            centers[:, p] = u_out
    d = _unit_rows(centers + config.sigma_prompt * rng.standard_normal((L, P, Q, D)))
    mags = np.exp(config.magnitude_mu + config.magnitude_sigma * rng.standard_normal((L, P, Q)))
    return d * mags[..., None]


def generate_concept(
    config: SynthConfig,
    concept_name: str = "synthetic",
    model_name: str = "synthetic",
) -> ConceptDataset:
    envelopes = synth_envelopes(config)
    ra_seq, pb_seq = np.random.SeedSequence([_u64(config.seed), 2]).spawn(2)
    tensors = {
        Variant.RESPONSE_AVG: DiffTensor(
            _generate_variant(config, envelopes[Variant.RESPONSE_AVG], np.random.default_rng(ra_seq))
        ),
        Variant.PROMPT_BOUNDARY: DiffTensor(
            _generate_variant(config, envelopes[Variant.PROMPT_BOUNDARY], np.random.default_rng(pb_seq))
        ),
    }
    return ConceptDataset(concept_name, model_name, tensors)


# ------------------------------------------------------------- external process


class ExternalEvaluator:
    """Client for an evaluator child process speaking line-delimited JSON.

    Each request carries an ``id``; responses echoing a different ``id`` are
    treated as stale replies to an earlier, timed-out request and skipped.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        timeout: float = 600.0,
        retries: int = 2,
        env: dict | None = None,
        stderr_lines: int = 200,
    ) -> None:
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.retries = retries
        self.last_retry_count = 0
        self.total_retries = 0
        self.calls = 0
        self._next_id = 0
        self._lock = threading.Lock()
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._stderr: deque[str] = deque(maxlen=stderr_lines)
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
            env=env,
        )
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()

    def _pump_stdout(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _pump_stderr(self) -> None:
        assert self._proc.stderr is not None
        for line in self._proc.stderr:
            self._stderr.append(line)

    @property
    def stderr_text(self) -> str:
        return "".join(self._stderr)

    def _died(self, what: str) -> EvaluatorDiedError:
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            pass
        code = self._proc.poll()
        return EvaluatorDiedError(f"evaluator {what} (exit code {code})", stderr=self.stderr_text)

    def _send(self, payload: dict) -> None:
        if self._proc.poll() is not None:
            raise self._died("exited before request")
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise self._died("closed its input") from None

    @staticmethod
    def _parse(line: str) -> dict:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response line {line.strip()[:200]!r}: {exc}") from None
        if not isinstance(msg, dict):
            raise ProtocolError(f"response is not a JSON object: {line.strip()[:200]!r}")
        return msg

    @staticmethod
    def _result(msg: dict) -> UtilityResult:
        scores = []
        for key in ("concept_score", "coherence"):
            if key not in msg:
                raise ProtocolError(f"response missing field {key!r}")
            val = msg[key]
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                raise ProtocolError(f"field {key!r} is not a finite number: {val!r}")
            if not 0.0 <= val <= 100.0:
                raise ProtocolError(f"field {key!r}={val} outside [0, 100]")
            scores.append(float(val))
        return UtilityResult.from_scores(*scores)

    def _await(self, request_id: int) -> UtilityResult:
        deadline = time.monotonic() + self.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise EvaluatorTimeoutError(f"no response within {self.timeout:g}s")
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise EvaluatorTimeoutError(f"no response within {self.timeout:g}s") from None
            if line is None:
                self._lines.put(None)  # keep EOF visible to later calls
                raise self._died("exited while a request was pending")
            if not line.strip():
                continue
            msg = self._parse(line)
            if "id" in msg and msg["id"] != request_id:
                log.debug("skipping stale response %r", msg)
                continue
            return self._result(msg)

    def evaluate(self, query: UtilityQuery) -> UtilityResult:
        with self._lock:
            self.calls += 1
            last: Exception | None = None
            for attempt in range(self.retries + 1):
                self._next_id += 1
                request = {**query.to_wire(), "id": self._next_id}
                self._send(request)
                try:
                    result = self._await(self._next_id)
                except (EvaluatorTimeoutError, ProtocolError) as exc:
                    log.warning("evaluator attempt %d failed: %s", attempt + 1, exc)
                    last = exc
                    continue
                self.last_retry_count = attempt
                self.total_retries += attempt
                return result
            self.last_retry_count = self.retries
            self.total_retries += self.retries
            assert last is not None
            raise last

    def close(self, timeout: float = 5.0) -> None:
        if self._proc.poll() is None:
            try:
                self._send({"shutdown": True})
                self._proc.stdin.close()  # type: ignore[union-attr]
                self._proc.wait(timeout=timeout)
            except (EvaluatorDiedError, subprocess.TimeoutExpired, OSError):
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> ExternalEvaluator:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
