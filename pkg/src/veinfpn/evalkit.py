"""Protocol construction and verification metrics (FMR, FNMR, EER, HTER, ROC)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ProtocolError, UndefinedRateError

# --------------------------------------------------------------------------
# rates


def fmr(false_matches: int, impostor_total: int) -> float:
    if impostor_total <= 0:
        raise UndefinedRateError("FMR undefined: no impostor comparisons")
    if not 0 <= false_matches <= impostor_total:
        raise ProtocolError(f"false matches {false_matches} outside [0, {impostor_total}]")
    return false_matches / impostor_total


def fnmr(false_non_matches: int, genuine_total: int) -> float:
    if genuine_total <= 0:
        raise UndefinedRateError("FNMR undefined: no genuine comparisons")
    if not 0 <= false_non_matches <= genuine_total:
        raise ProtocolError(f"false non-matches {false_non_matches} outside [0, {genuine_total}]")
    return false_non_matches / genuine_total


def render_percent(value: Fraction | float | int, decimals: int = 1) -> str:
    """Percentage with half-away-from-zero rounding, computed exactly.

    Floats are converted via their exact binary value, so pass a
    :class:`~fractions.Fraction` when the ratio is known exactly.
    """
    frac = Fraction(value) * 100
    d = Decimal(frac.numerator) / Decimal(frac.denominator)
    q = Decimal(1).scaleb(-decimals)
    return str(d.quantize(q, rounding=ROUND_HALF_UP))


def rate_fraction(errors: int, total: int) -> Fraction:
    if total <= 0:
        raise UndefinedRateError("rate undefined: zero total")
    return Fraction(errors, total)


def hter_fraction(false_matches: int, impostor_total: int, false_non_matches: int, genuine_total: int) -> Fraction:
    return (rate_fraction(false_matches, impostor_total) + rate_fraction(false_non_matches, genuine_total)) / 2


# --------------------------------------------------------------------------
# score sets


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self) -> None:
        self.genuine = np.sort(np.asarray(self.genuine, dtype=np.float64).reshape(-1))
        self.impostor = np.sort(np.asarray(self.impostor, dtype=np.float64).reshape(-1))
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ProtocolError("scores must be finite")

    @classmethod
    def from_rows(cls, rows: Iterable) -> "ScoreSet":
        rows = list(rows)
        return cls(
            [r.score for r in rows if r.is_genuine],
            [r.score for r in rows if not r.is_genuine],
        )

    def require_both(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ProtocolError(
                f"need both classes (genuine={self.genuine.size}, impostor={self.impostor.size})"
            )

    def counts(self, threshold: float) -> tuple[int, int, int, int]:
        """(false_matches, impostor_total, false_non_matches, genuine_total); score >= t accepts."""
        fm = int(self.impostor.size - np.searchsorted(self.impostor, threshold, side="left"))
        fnm = int(np.searchsorted(self.genuine, threshold, side="left"))
        return fm, int(self.impostor.size), fnm, int(self.genuine.size)


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    """Midpoints between adjacent distinct scores plus -inf and +inf."""
    u = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    mids = 0.5 * (u[:-1] + u[1:])
    return np.concatenate(([-np.inf], mids, [np.inf]))


def _sweep(scores: ScoreSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fm = scores.impostor.size - np.searchsorted(scores.impostor, thresholds, side="left")
    fnm = np.searchsorted(scores.genuine, thresholds, side="left")
    return fm, fnm


def eer_threshold(scores: ScoreSet) -> tuple[float, float]:
    """Threshold minimising |FMR - FNMR| over the candidate set; lowest such threshold wins.

    Returns ``(threshold, eer)`` with ``eer = (FMR + FNMR) / 2`` at that threshold.
    """
    scores.require_both()
    t = candidate_thresholds(scores)
    fm, fnm = _sweep(scores, t)
    ni, ng = scores.impostor.size, scores.genuine.size
    # compare |fm/ni - fnm/ng| exactly via the common denominator
    gap = np.abs(fm.astype(np.int64) * ng - fnm.astype(np.int64) * ni)
    best = int(np.argmin(gap))
    eer = (Fraction(int(fm[best]), ni) + Fraction(int(fnm[best]), ng)) / 2
    return float(t[best]), float(eer)


@dataclass
class MetricsReport:
    fmr: float
    fnmr: float
    hter: float
    threshold: float
    counts: tuple[int, int, int, int]
    roc: list[tuple[float, float]] = field(default_factory=list)
    histograms: dict = field(default_factory=dict)

    def rendered(self) -> dict[str, str]:
        fm, ni, fnm, ng = self.counts
        return {
            "fmr": f"{render_percent(Fraction(fm, ni))} ({fm}/{ni})",
            "fnmr": f"{render_percent(Fraction(fnm, ng))} ({fnm}/{ng})",
            "hter": render_percent(hter_fraction(fm, ni, fnm, ng)),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        d["roc"] = [list(p) for p in self.roc]
        d["threshold"] = _json_float(self.threshold)
        d["rendered"] = self.rendered()
        return d


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def hter(scores: ScoreSet, threshold: float) -> MetricsReport:
    """Error rates of a fixed (dev-derived) threshold on a score set."""
    fm, ni, fnm, ng = scores.counts(threshold)
    a, b = fmr(fm, ni), fnmr(fnm, ng)
    return MetricsReport(a, b, float(hter_fraction(fm, ni, fnm, ng)), float(threshold), (fm, ni, fnm, ng))


def roc_points(scores: ScoreSet) -> list[tuple[float, float]]:
    """(FMR, 1 - FNMR) for every candidate threshold, sorted by FMR."""
    scores.require_both()
    t = candidate_thresholds(scores)[::-1]
    fm, fnm = _sweep(scores, t)
    ni, ng = scores.impostor.size, scores.genuine.size
    return [(float(a) / ni, 1.0 - float(b) / ng) for a, b in zip(fm, fnm)]


@dataclass
class Histogram:
    edges: np.ndarray
    genuine: np.ndarray
    impostor: np.ndarray


def histogram(scores: ScoreSet, n_bins: int = 20) -> Histogram:
    """Equal-width bins spanning the min and max of all scores."""
    if n_bins < 1:
        raise ProtocolError("n_bins must be at least 1")
    both = np.concatenate([scores.genuine, scores.impostor])
    if both.size == 0:
        return Histogram(np.linspace(0.0, 1.0, n_bins + 1), np.zeros(n_bins, int), np.zeros(n_bins, int))
    lo, hi = float(both.min()), float(both.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    g, _ = np.histogram(scores.genuine, edges)
    i, _ = np.histogram(scores.impostor, edges)
    return Histogram(edges, g, i)


def evaluate(dev: ScoreSet, eval_: ScoreSet, n_bins: int = 20) -> tuple[MetricsReport, MetricsReport]:
    """EER threshold on ``dev`` applied to ``eval_``; returns (dev_report, eval_report)."""
    t, _ = eer_threshold(dev)
    reports = []
    for s in (dev, eval_):
        s.require_both()
        r = hter(s, t)
        r.roc = roc_points(s)
        h = histogram(s, n_bins)
        r.histograms = {
            "edges": h.edges.tolist(),
            "genuine": h.genuine.tolist(),
            "impostor": h.impostor.tolist(),
        }
        reports.append(r)
    return reports[0], reports[1]


# --------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class ManifestEntry:
    client: str
    finger: str
    session: int
    file: str
    mask: str = ""

    @property
    def identity(self) -> str:
        return f"{self.client}_{self.finger}"

    @property
    def sample_id(self) -> str:
        return f"{self.identity}_s{self.session}"


@dataclass
class ProtocolSplit:
    train: list[str]
    dev: list[str]
    eval: list[str]
    enroll_sessions: list[int]
    probe_sessions: list[int]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        a, b, c = set(self.train), set(self.dev), set(self.eval)
        if a & b or a & c or b & c:
            raise ProtocolError("train, dev and eval identities must be disjoint")
        if set(self.enroll_sessions) & set(self.probe_sessions):
            raise ProtocolError("a session cannot be both enrollment and probe")
        if self.enroll_sessions and self.probe_sessions and max(self.enroll_sessions) >= min(self.probe_sessions):
            raise ProtocolError("enrollment sessions must precede probe sessions")

    def subset(self, name: str) -> list[str]:
        if name not in ("train", "dev", "eval"):
            raise ProtocolError(f"unknown subset {name!r}")
        return getattr(self, name)

    def samples(self, name: str, role: str) -> list[ManifestEntry]:
        ids = set(self.subset(name))
        sessions = {"enroll": self.enroll_sessions, "probe": self.probe_sessions, "all": None}[role]
        return sorted(
            (e for e in self.entries if e.identity in ids and (sessions is None or e.session in sessions)),
            key=lambda e: (e.identity, e.session, e.file),
        )

    def comparisons(self, name: str) -> list[tuple[str, str, bool]]:
        """Every probe sample of the subset against every model: (probe_id, model_id, is_genuine)."""
        models = sorted(self.subset(name))
        out = []
        for p in self.samples(name, "probe"):
            for m in models:
                out.append((p.sample_id, m, p.identity == m))
        return out

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "dev": list(self.dev),
            "eval": list(self.eval),
            "enroll_sessions": list(self.enroll_sessions),
            "probe_sessions": list(self.probe_sessions),
            "comparisons": {k: [list(c) for c in self.comparisons(k)] for k in ("dev", "eval")},
        }


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Identity counts per subset: floor of the train share, the rest shared by dev and eval."""
    if len(fractions) != 3:
        raise ProtocolError("need three fractions (train, dev, eval)")
    f = [float(x) for x in fractions]
    if any(x < 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
        raise ProtocolError(f"fractions {fractions} must be non-negative and sum to 1")
    n_train = math.floor(n * f[0] + 1e-9)
    rest = n - n_train
    n_dev = round(rest * f[1] / (f[1] + f[2])) if f[1] + f[2] > 0 else 0
    return n_train, n_dev, rest - n_dev


def build_nom_protocol(
    manifest: Sequence[ManifestEntry],
    enroll_sessions: Sequence[int],
    probe_sessions: Sequence[int],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    client_ranges: Mapping[str, tuple[int, int]] | None = None,
) -> ProtocolSplit:
    """Disjoint identity split with session-based enrollment and probe roles.

    With ``client_ranges`` (inclusive numeric client ranges per subset) the
    split follows client numbers instead of fractions.
    """
    if not manifest:
        raise ProtocolError("empty manifest")
    identities = sorted({e.identity for e in manifest})
    seen = {e.session for e in manifest}
    missing = sorted((set(enroll_sessions) | set(probe_sessions)) - seen)
    if missing:
        raise ProtocolError(f"sessions {missing} do not occur in the manifest")
    if client_ranges is not None:
        spans = sorted(client_ranges.values())
        if any(lo > hi for lo, hi in spans) or any(a[1] >= b[0] for a, b in zip(spans, spans[1:])):
            raise ProtocolError(f"client ranges {dict(client_ranges)} are empty or overlap")
        by_id = {e.identity: e.client for e in manifest}
        groups: dict[str, list[str]] = {"train": [], "dev": [], "eval": []}
        for ident in identities:
            num = _client_number(by_id[ident])
            for name, (lo, hi) in client_ranges.items():
                if name not in groups:
                    raise ProtocolError(f"unknown subset {name!r} in client ranges")
                if lo <= num <= hi:
                    groups[name].append(ident)
                    break
        split = ProtocolSplit(groups["train"], groups["dev"], groups["eval"], list(enroll_sessions), list(probe_sessions), list(manifest))
    else:
        n_train, n_dev, _ = split_counts(len(identities), fractions)
        split = ProtocolSplit(
            identities[:n_train],
            identities[n_train : n_train + n_dev],
            identities[n_train + n_dev :],
            list(enroll_sessions),
            list(probe_sessions),
            list(manifest),
        )
    return split


def _client_number(client: str) -> int:
    digits = "".join(ch for ch in client if ch.isdigit())
    if not digits:
        raise ProtocolError(f"client id {client!r} has no number")
    return int(digits)


MANIFEST_FIELDS = ("client", "finger", "session", "file")


def read_manifest(path) -> list[ManifestEntry]:
    """CSV with columns client, finger, session, file and optionally mask."""
    import csv

    from .errors import FormatError

    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    if rows and not all(k in rows[0] for k in MANIFEST_FIELDS):
        raise FormatError(f"{path}: manifest needs columns {', '.join(MANIFEST_FIELDS)}")
    out = []
    for lineno, r in enumerate(rows, start=2):
        try:
            session = int(r["session"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: bad session {r['session']!r}") from exc
        out.append(ManifestEntry(r["client"], r["finger"], session, r["file"], r.get("mask") or ""))
    return out
