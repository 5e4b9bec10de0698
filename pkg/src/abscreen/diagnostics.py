"""Corpus-comparison statistics and open-access enrichment.

The two tests are implemented from first principles because their two-sided
conventions matter downstream and must be pinned:

* Mann-Whitney U uses average ranks for ties. With n1+n2 <= EXACT_THRESHOLD
  the two-sided p comes from full enumeration of group assignments,
  P(|U - n1*n2/2| >= |U_obs - n1*n2/2|); beyond that, a normal
  approximation with tie and continuity corrections.
* Fisher's exact two-sided p is the probability-mass method: the sum of
  hypergeometric probabilities of all tables (margins fixed) no more
  probable than the observed one, with a 1e-7 relative tolerance on the
  "no more probable" comparison.

The reported odds ratio is the unconditional sample OR (a*d)/(b*c); a zero
denominator cell yields math.inf.
"""

from __future__ import annotations

import itertools
import json
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

from .corpus import CorpusStats, Record

EXACT_THRESHOLD = 20


class DiagnosticsError(Exception):
    pass


class EmptySample(DiagnosticsError):
    pass


class DegenerateMargins(DiagnosticsError):
    pass


class OAClientError(DiagnosticsError):
    """Raised by OA lookup clients when the service cannot be reached."""


@dataclass(frozen=True)
class MannWhitneyResult:
    u_statistic: float  # U for the first sample
    p_value: float
    method: str  # "exact" | "normal_approx"
    n1: int
    n2: int

    @property
    def u_other(self) -> float:
        return self.n1 * self.n2 - self.u_statistic


@dataclass(frozen=True)
class FisherResult:
    odds_ratio: float  # math.inf when a zero cell makes the ratio unbounded
    p_value: float
    table: tuple[int, int, int, int]


@dataclass(frozen=True)
class OAStatus:
    record_id: str
    status: str  # "open" | "closed" | "unknown"
    source: str  # "unpaywall" | "doaj" | "manual" | "none"

    def __post_init__(self):
        if (self.status == "unknown") != (self.source == "none"):
            raise DiagnosticsError(f"inconsistent OA status/source: {self.status}/{self.source}")


def _double_ranks(pooled: Sequence[float]) -> list[int]:
    """Average ranks of the pooled sample, scaled by 2 so ties stay integral."""
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    out = [0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        avg2 = i + j + 2  # 2 * average 1-based rank of the tie run
        for k in range(i, j + 1):
            out[order[k]] = avg2
        i = j + 1
    return out


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test of x vs y."""
    if not x or not y:
        raise EmptySample("both samples must be non-empty")
    n1, n2 = len(x), len(y)
    n = n1 + n2
    pooled = list(x) + list(y)
    rank2 = _double_ranks(pooled)
    # 2*U_x = 2*R_x - n1*(n1+1); everything stays integer-exact.
    u2 = sum(rank2[:n1]) - n1 * (n1 + 1)
    mean2 = n1 * n2  # 2 * (n1*n2/2)
    u_stat = u2 / 2.0

    if n <= EXACT_THRESHOLD:
        dev_obs = abs(u2 - mean2)
        hits = 0
        total = 0
        base = n1 * (n1 + 1)
        for combo in itertools.combinations(rank2, n1):
            dev = abs(sum(combo) - base - mean2)
            if dev >= dev_obs:
                hits += 1
            total += 1
        return MannWhitneyResult(u_statistic=u_stat, p_value=hits / total, method="exact", n1=n1, n2=n2)

    # Normal approximation with tie correction and 0.5 continuity correction.
    counts: dict[int, int] = {}
    for r in rank2:
        counts[r] = counts.get(r, 0) + 1
    tie_term = sum(t**3 - t for t in counts.values())
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u_statistic=u_stat, p_value=1.0, method="normal_approx", n1=n1, n2=n2)
    z = max(0.0, abs(u_stat - mean2 / 2.0) - 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return MannWhitneyResult(u_statistic=u_stat, p_value=p, method="normal_approx", n1=n1, n2=n2)


def _log_choose(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def fisher_exact_2x2(a: int, b: int, c: int, d: int) -> FisherResult:
    """Fisher's exact test on the 2x2 table [[a, b], [c, d]]."""
    if min(a, b, c, d) < 0:
        raise DegenerateMargins("cell counts must be non-negative")
    r1, r2, c1, c2 = a + b, c + d, a + c, b + d
    if min(r1, r2, c1, c2) == 0:
        raise DegenerateMargins("all row and column margins must be positive")
    n = r1 + r2

    odds_ratio = math.inf if b * c == 0 else (a * d) / (b * c)

    log_denom = _log_choose(n, c1)
    a_min = max(0, c1 - r2)
    a_max = min(r1, c1)

    def log_pmf(k: int) -> float:
        return _log_choose(r1, k) + _log_choose(r2, c1 - k) - log_denom

    obs = log_pmf(a)
    cutoff = obs + math.log1p(1e-7)
    p = 0.0
    for k in range(a_min, a_max + 1):
        lp = log_pmf(k)
        if lp <= cutoff:
            p += math.exp(lp)
    return FisherResult(odds_ratio=odds_ratio, p_value=min(1.0, p), table=(a, b, c, d))


class OALookupClient(Protocol):
    def lookup(self, doi: str) -> tuple[str, str]:
        """Return (status, source) for a DOI; raise OAClientError when unreachable."""
        ...


class StaticOAClient:
    """Scripted lookup table; the canonical test double."""

    def __init__(self, mapping: dict[str, tuple[str, str]], unreachable: bool = False):
        self.mapping = mapping
        self.unreachable = unreachable
        self.calls = 0

    def lookup(self, doi: str) -> tuple[str, str]:
        self.calls += 1
        if self.unreachable:
            raise OAClientError("scripted outage")
        return self.mapping.get(doi, ("closed", "unpaywall"))


class UnpaywallClient:
    """Minimal Unpaywall REST lookup; requires a contact email, throttled to rpm."""

    def __init__(self, email: str, rpm: int = 60, base_url: str = "https://api.unpaywall.org/v2"):
        if not email:
            raise DiagnosticsError("Unpaywall requires a contact email")
        self.email = email
        self.base_url = base_url.rstrip("/")
        self._min_interval = 60.0 / rpm
        self._last_call = 0.0

    def lookup(self, doi: str) -> tuple[str, str]:
        import urllib.error
        import urllib.parse
        import urllib.request

        wait = self._min_interval - (time.monotonic() - self._last_call)
        if wait > 0:
            time.sleep(wait)
        self._last_call = time.monotonic()
        url = f"{self.base_url}/{urllib.parse.quote(doi)}?email={urllib.parse.quote(self.email)}"
        try:
            with urllib.request.urlopen(url, timeout=30) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        except urllib.error.URLError as exc:
            raise OAClientError(f"unpaywall unreachable: {exc}") from exc
        return ("open" if data.get("is_oa") else "closed", "unpaywall")


def oa_enrich(
    records: Iterable[Record],
    client: OALookupClient,
    cache_path: str | Path,
) -> list[OAStatus]:
    """Look up open-access status per record, cache-first.

    Records without a DOI stay unknown. A client outage degrades the
    remaining lookups to unknown instead of failing the run.
    """
    cache_path = Path(cache_path)
    cache: dict[str, tuple[str, str]] = {}
    if cache_path.exists():
        for line in cache_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            cache[entry["doi"]] = (entry["status"], entry["source"])

    out: list[OAStatus] = []
    degraded = False
    with cache_path.open("a", encoding="utf-8") as fh:
        for rec in records:
            if not rec.doi:
                out.append(OAStatus(rec.record_id, "unknown", "none"))
                continue
            if rec.doi in cache:
                status, source = cache[rec.doi]
                out.append(OAStatus(rec.record_id, status, source))
                continue
            if degraded:
                out.append(OAStatus(rec.record_id, "unknown", "none"))
                continue
            try:
                status, source = client.lookup(rec.doi)
            except OAClientError:
                degraded = True
                out.append(OAStatus(rec.record_id, "unknown", "none"))
                continue
            cache[rec.doi] = (status, source)
            fh.write(json.dumps({"doi": rec.doi, "status": status, "source": source,
                                 "fetched_at": time.time()}) + "\n")
            out.append(OAStatus(rec.record_id, status, source))
    return out


def compare_corpora(stats_a: CorpusStats, stats_b: CorpusStats) -> dict:
    """Abstract-length and year Mann-Whitney plus open-access Fisher, as one report."""

    def mw_row(xs: Sequence[float], ys: Sequence[float], median_a, median_b) -> Optional[dict]:
        if not xs or not ys:
            return None
        res = mann_whitney_u(xs, ys)
        return {
            "median_a": median_a,
            "median_b": median_b,
            "u_statistic": res.u_statistic,
            "p_value": res.p_value,
            "method": res.method,
        }

    lengths_a = [n for n in stats_a.abstract_length_chars if n > 0]
    lengths_b = [n for n in stats_b.abstract_length_chars if n > 0]
    years_a = list(stats_a.publication_years)
    years_b = list(stats_b.publication_years)

    oa_a = stats_a.open_access_counts
    oa_b = stats_b.open_access_counts
    fisher_row: Optional[dict] = None
    if min(oa_a["open"] + oa_a["closed"], oa_b["open"] + oa_b["closed"]) > 0:
        try:
            res = fisher_exact_2x2(oa_a["open"], oa_a["closed"], oa_b["open"], oa_b["closed"])
            fisher_row = {
                "table": {"a_open": oa_a["open"], "a_closed": oa_a["closed"],
                          "b_open": oa_b["open"], "b_closed": oa_b["closed"]},
                "odds_ratio": res.odds_ratio,
                "p_value": res.p_value,
                "unknown_a": oa_a["unknown"],
                "unknown_b": oa_b["unknown"],
            }
        except DegenerateMargins:
            fisher_row = None

    return {
        "abstract_length_chars": mw_row(lengths_a, lengths_b, _median(lengths_a), _median(lengths_b)),
        "publication_year": mw_row(years_a, years_b, _median(years_a), _median(years_b)),
        "open_access": fisher_row,
    }


def _median(values: Sequence[float]) -> Optional[float]:
    return float(statistics.median(values)) if values else None
