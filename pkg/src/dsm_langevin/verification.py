"""Verification suites: every theoretical claim of the package checked
against an independent oracle (dense linear algebra, finite differences,
Monte Carlo). Each suite returns a :class:`SuiteResult` carrying the
statistic, the tolerance it was compared with and a pass flag.

Two budgets are provided: ``"quick"`` for smoke runs and ``"full"`` for
the acceptance tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import loglog_slope
from .estimation import ChainConfig
from .gaussian_metrics import bures_sq, bures_taylor2, psd_sqrt, sqrt_taylor2
from .langevin import (
    PerturbationLaw,
    expected_w2_perturbed,
    perturbed_distance,
    run_ula_chain,
    sigma_expansion,
    ula_stationary,
)
from .matrixkit import lyap_inverse_dense, lyap_inverse_spd, stability_bound
from .pipeline import (
    PipelineParams,
    expected_pipeline_error,
    mean_bias_term,
    nested_pipeline_mc,
    perturbation_law_from_sgd,
    sigma_tradeoff_scan,
)
from .score_theory import (
    TAU_N_COEFFICIENTS,
    LinearScore,
    blocks_to_cov,
    isserlis_sigma_eps_oracle,
    noise_matrix_sigma_eps,
    sgd_full_moments,
    sgd_stationary_exact,
    sigma_eps_four_terms,
)
from .seeding import task_rng
from .sgd_sim import EmpiricalData, ExactData, run_sgd_chain, total_covariance_oracle

Z_TOL = 4.0


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    statistic: float
    tolerance: str
    detail: dict = field(default_factory=dict)


def random_spd(rng, d, lo=0.2, hi=2.0):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def _max_abs_z(est, ref, se):
    gap = np.abs(np.asarray(est) - np.asarray(ref))
    se = np.asarray(se)
    z = np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap < 1e-14, 0.0, np.inf))
    return float(np.max(z))


def _upper(M):
    return M[np.triu_indices(M.shape[0])]


# 1. Lyapunov inverse: eigenbasis vs dense solve

def suite_lyapunov(seed, budget="full"):
    rng = task_rng(seed, "verify/lyapunov")
    n = 100 if budget == "full" else 20
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        C = random_spd(rng, d)
        X = rng.standard_normal((d, d))
        X = X + X.T
        for frac in (0.0, 0.5):
            tau = frac * stability_bound(C)
            a = lyap_inverse_spd(C, tau, X)
            b = lyap_inverse_dense(C, tau, X)
            worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    return SuiteResult("lyapunov", worst <= 1e-10, worst, "relative Frobenius error <= 1e-10", {"cases": n})


# 2. ULA chain vs exact stationary law

def _random_stable_score(rng, d):
    S = random_spd(rng, d, 0.5, 2.0)
    K = rng.standard_normal((d, d)) * 0.2
    A = S + (K - K.T)
    ev = np.linalg.eigvals(A)
    gmax = float(np.min(2.0 * ev.real / np.abs(ev) ** 2))
    gamma = float(rng.uniform(0.1, 0.5) * gmax)
    return LinearScore(A, rng.standard_normal(d)), gamma


def suite_ula(seed, budget="full"):
    rng = task_rng(seed, "verify/ula")
    n_cases = 10 if budget == "full" else 3
    replicas = 64 if budget == "full" else 32
    worst = 0.0
    details = []
    cases = [(LinearScore(np.eye(1), np.zeros(1)), 0.5)]
    cases += [_random_stable_score(rng, int(rng.integers(1, 5))) for _ in range(n_cases)]
    for k, (score, gamma) in enumerate(cases):
        rate = float(np.min(np.linalg.eigvals(score.A).real))
        relax = 1.0 / (gamma * rate)
        thin = max(1, math.ceil(10 * relax / 1000))
        cfg = ChainConfig(n_steps=1000 * thin, thinning=thin, seed=seed, replicas=replicas)
        est = run_ula_chain(score, gamma, cfg, path=f"verify/ula/{k}")
        law = ula_stationary(score, gamma)
        if k == 0:
            a = score.A[0, 0]
            ref_cov = np.array([[2.0 / (2.0 * a - gamma * a * a)]])
        else:
            ref_cov = law.cov.entries
        z = max(_max_abs_z(est.mean, law.mean, est.se_mean), _max_abs_z(_upper(est.cov), _upper(ref_cov), _upper(est.se_cov)))
        worst = max(worst, z)
        details.append({"case": k, "d": score.dim, "gamma": gamma, "max_z": z})
    return SuiteResult("ula", worst <= Z_TOL, worst, "max |z| <= 4 standard errors", {"cases": details})


# 3. SGD stationary moments vs the three-term expansion

SGD_CASES = ((1.0,), (1.0, 0.5))
SGD_TAUS = (0.02, 0.01, 0.005)
SGD_NS = (50, 200, math.inf)


def tau_n_adjudication(spectrum, sigma, N, n_datasets, seed):
    """Monte Carlo estimate of the tau/N coefficient c_i in c_i tau/(N sigma^2) p_i^2.

    To first order in tau the dataset-averaged SGD covariance of b is
    tau/(2 sigma^2) E[P(C_N)]; the tau/N term is the dataset bias of P.
    """
    lam = np.asarray(spectrum, dtype=float)
    d = lam.size
    rng = task_rng(seed, f"verify/sgd_moments/adjudicate/{d}/{N}")
    acc = np.zeros(d)
    acc2 = np.zeros(d)
    done = 0
    while done < n_datasets:
        m = min(2000, n_datasets - done)
        X = rng.standard_normal((m, N, d)) * np.sqrt(lam)
        X = X - X.mean(axis=1, keepdims=True)
        Ch = np.einsum("mni,mnj->mij", X, X) / N
        P = np.eye(d) - sigma**2 * np.linalg.inv(Ch + sigma**2 * np.eye(d))
        diag = np.diagonal(P, axis1=1, axis2=2)
        acc += diag.sum(axis=0)
        acc2 += (diag**2).sum(axis=0)
        done += m
    mean = acc / n_datasets
    se = np.sqrt((acc2 / n_datasets - mean**2) / n_datasets)
    p = lam / (lam + sigma**2)
    coef = N * (mean - p) / (2.0 * p**2)
    coef_se = N * se / (2.0 * p**2)
    ls = lam + sigma**2
    derived = -0.5 * sigma**2 * (lam / ls**2 + lam**2 / ls**3 + np.sum(p) * lam / ls**2) / p**2
    return coef, coef_se, derived


def _sgd_budget(budget):
    if budget == "full":
        return {"replicas": 1000, "span": 10, "adjudicate": 100_000, "oracle": 10_000,
                "cases": SGD_CASES, "taus": SGD_TAUS, "Ns": SGD_NS}
    return {"replicas": 200, "span": 5, "adjudicate": 10_000, "oracle": 1000,
            "cases": SGD_CASES[:1], "taus": SGD_TAUS[-1:], "Ns": (200, math.inf)}


def suite_sgd_moments(seed, budget="full", tau_n_term="minus"):
    """Simulated SGD covariances against the three-term expansion.

    The same simulations are also compared with the exact dataset-averaged
    stationary covariance (``total_covariance_oracle``), which isolates
    the truncation error of the expansion from simulation error.
    """
    b = _sgd_budget(budget)
    sigma = 1.0
    worst = 0.0
    worst_exact = 0.0
    points = []
    slopes = []
    for spectrum in b["cases"]:
        C = np.diag(spectrum)
        d = len(spectrum)
        k = d * d
        for tau in b["taus"]:
            relax = 1.0 / (tau * min(min(spectrum) + sigma**2, 1.0))
            thin = max(1, math.ceil(b["span"] * relax / 1000))
            cfg = ChainConfig(n_steps=1000 * thin, thinning=thin, seed=seed, replicas=b["replicas"])
            for N in b["Ns"]:
                src = ExactData() if N == math.inf else EmpiricalData(N, seed, per_replica=True)
                tag = f"{d}/{tau}/{N}"
                est = run_sgd_chain(C, sigma, tau, src, cfg, path=f"verify/sgd_moments/{tag}")
                th = sgd_full_moments(C, sigma, tau, N, tau_n_term)
                z_b = _max_abs_z(_upper(est.cov[k:, k:]), _upper(th.cov_b), _upper(est.se_cov[k:, k:]))
                z_A = _max_abs_z(_upper(est.cov[:k, :k]), _upper(th.cov_A), _upper(est.se_cov[:k, :k]))
                ocov, ose = total_covariance_oracle(C, sigma, tau, N, b["oracle"], seed, path=f"verify/oracle/{tag}")
                se = np.sqrt(est.se_cov**2 + ose**2)
                z_exact = _max_abs_z(_upper(est.cov), _upper(ocov), _upper(se))
                worst = max(worst, z_b, z_A)
                worst_exact = max(worst_exact, z_exact)
                points.append({"d": d, "tau": tau, "N": "inf" if N == math.inf else N,
                               "max_z_cov_b": z_b, "max_z_cov_A": z_A, "max_z_exact": z_exact,
                               "n_effective": est.n_effective})
        # remainder of the exact stationary covariance beyond the modeled terms (N = infinity)
        taus = np.array(b["taus"])
        rem = []
        for tau in taus:
            cb, cA = blocks_to_cov(sgd_stationary_exact(C, sigma, None, tau))
            th = sgd_full_moments(C, sigma, tau, math.inf)
            rem.append(np.linalg.norm(cb - th.cov_b) + np.linalg.norm(cA - th.cov_A))
        if len(taus) >= 2:
            slopes.append(loglog_slope(taus, rem).slope)
    adjud = []
    for spectrum in b["cases"]:
        for N in [n for n in b["Ns"] if n != math.inf]:
            coef, coef_se, derived = tau_n_adjudication(spectrum, sigma, N, b["adjudicate"], seed)
            adjud.append({"d": len(spectrum), "N": N, "coef": coef.tolist(), "coef_se": coef_se.tolist(),
                          "derived": derived.tolist()})
    negative = all(all(c + Z_TOL * s < 0 for c, s in zip(a["coef"], a["coef_se"])) for a in adjud)
    slope_ok = all(s > 1.0 for s in slopes)
    passed = worst <= Z_TOL and slope_ok and negative
    detail = {
        "points": points,
        "max_z_model": worst,
        "max_z_exact": worst_exact,
        "simulation_matches_exact": worst_exact <= Z_TOL,
        "remainder_slopes": slopes,
        "tau_n_adjudication": adjud,
        "adopted_tau_n_sign": "-" if TAU_N_COEFFICIENTS.get(tau_n_term, -1.0) < 0 else "+",
        "tau_n_sign_supported_by_simulation": "-" if negative else "undetermined",
    }
    return SuiteResult("sgd_moments", passed, worst,
                       "max |z| <= 4 SE vs model; remainder slope in tau > 1; tau/N coefficient negative beyond 4 SE",
                       detail)


# 4. Gradient-noise matrix vs Isserlis assembly and sampling

def suite_isserlis(seed, budget="full"):
    rng = task_rng(seed, "verify/isserlis")
    worst_rel = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 4))
        C = random_spd(rng, d)
        sigma = float(rng.uniform(0.3, 2.0))
        mu = rng.standard_normal(d)
        i, j = (int(v) for v in rng.integers(0, d, 2))
        a = noise_matrix_sigma_eps(C, sigma, mu, i, j)
        b = sigma_eps_four_terms(C, sigma, mu, i, j)
        worst_rel = max(worst_rel, np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))
    n = 1_000_000 if budget == "full" else 100_000
    cases = [((1.0,), 1.0, (0.0,)), ((1.0,), 1.0, (1.0,)), ((2.0, 0.5), 0.7, (0.3, -0.5)), ((1.5, 1.0, 0.4), 1.2, (0.0, 0.5, -0.2))]
    worst_z = 0.0
    for k, (lam, sigma, mu) in enumerate(cases):
        d = len(lam)
        Q, _ = np.linalg.qr(task_rng(seed, f"verify/isserlis/basis/{k}").standard_normal((d, d)))
        C = (Q * np.array(lam)) @ Q.T
        for i, j in ((0, 0), (0, d - 1)):
            mean, se = isserlis_sigma_eps_oracle(C, sigma, np.array(mu), i, j, n, seed + k)
            worst_z = max(worst_z, _max_abs_z(mean, noise_matrix_sigma_eps(C, sigma, np.array(mu), i, j), se))
    passed = worst_rel <= 1e-10 and worst_z <= Z_TOL
    return SuiteResult("isserlis", passed, worst_z, "four-term assembly rel. error <= 1e-10; oracle max |z| <= 4",
                       {"assembly_max_rel_error": worst_rel, "oracle_max_z": worst_z, "n_samples": n})


# 5. Orders of the second-order expansions

EPS_GRID = np.geomspace(1e-3, 1e-1, 8)


def expansion_slopes(seed):
    rng = task_rng(seed, "verify/expansions")
    d = 3
    H0 = random_spd(rng, d)
    H1 = rng.standard_normal((d, d))
    H1 = H1 + H1.T
    H2 = rng.standard_normal((d, d))
    H2 = H2 + H2.T
    Sig = random_spd(rng, d)
    S, X1, X2 = sqrt_taylor2(H0, H1)
    r_sqrt = [np.linalg.norm(psd_sqrt(H0 + e * H1) - (S + e * X1 + e * e * X2)) for e in EPS_GRID]
    c0, c1, c2 = bures_taylor2(Sig, H0, H1, H2)
    r_bures = [abs(bures_sq(Sig, H0 + e * H1 + e * e * H2) - (c0 + e * c1 + e * e * c2)) for e in EPS_GRID]
    lam = rng.uniform(0.3, 2.0, d)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    C = (Q * lam) @ Q.T
    sigma, gamma = 0.8, 0.3
    Delta = rng.standard_normal((d, d))
    S0, S1, S2 = sigma_expansion(C, sigma, gamma, Delta)
    A_star = np.linalg.inv(C + sigma**2 * np.eye(d))
    r_sig = []
    for e in EPS_GRID:
        cov = ula_stationary(LinearScore(A_star + e * Delta, np.zeros(d)), gamma).cov.entries
        r_sig.append(np.linalg.norm(cov - (S0 + e * S1 + e * e * S2)))
    return {name: loglog_slope(EPS_GRID, r).slope for name, r in
            (("sqrt_taylor2", r_sqrt), ("bures_taylor2", r_bures), ("sigma_expansion", r_sig))}


def suite_expansions(seed, budget="full"):
    slopes = expansion_slopes(seed)
    worst = min(slopes.values())
    return SuiteResult("expansions", worst >= 2.7, worst, "log-log remainder slope >= 2.7", {"slopes": slopes})


# 6. Expected distance under a random score perturbation

PERTURB_EPS = (0.02, 0.01, 0.005)


def random_law(rng, d):
    m2 = rng.uniform(0.2, 1.0, (d, d))
    m2x = np.diag(np.diag(m2)).astype(float)
    for i in range(d):
        for j in range(i + 1, d):
            m2x[i, j] = m2x[j, i] = rng.uniform(-0.8, 0.8) * math.sqrt(m2[i, j] * m2[j, i])
    B = rng.standard_normal((d, d))
    return PerturbationLaw(B @ B.T / d, m2, m2x)


def _quadratic_model(C, sigma, gamma, delta, Delta, eps, flavor):
    d = C.shape[0]
    S0, S1, S2 = sigma_expansion(C, sigma, gamma, Delta)
    Cs = C + sigma**2 * np.eye(d)
    mean_sq = float(np.sum((Cs @ delta) ** 2))
    if flavor == "wasserstein":
        c0, c1, c2 = bures_taylor2(C, S0, S1, S2)
    else:
        g = C - S0
        c0, c1, c2 = float(np.sum(g * g)), float(-2.0 * np.sum(g * S1)), float(np.sum(S1 * S1) - 2.0 * np.sum(g * S2))
    return c0 + eps * c1 + eps**2 * (c2 + mean_sq)


def perturbation_scan(seed, n_draws, flavor):
    rng = task_rng(seed, f"verify/perturbed_w2/{flavor}")
    d = 2
    lam = np.array([1.0, 0.4])
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    C = (Q * lam) @ Q.T
    sigma, gamma = 0.7, 0.2
    law = random_law(rng, d)
    U = np.linalg.eigh(C)[1][:, ::-1]
    rows = []
    for eps in PERTURB_EPS:
        formula = expected_w2_perturbed(C, sigma, gamma, law, eps, flavor)
        half = n_draws // 2
        delta, Delta = law.sample(task_rng(seed, f"verify/perturbed_w2/{flavor}/{eps}"), half, U)
        exact = np.empty((half, 2))
        model = np.empty((half, 2))
        for k in range(half):
            for s, sgn in enumerate((1.0, -1.0)):
                exact[k, s] = perturbed_distance(C, sigma, gamma, sgn * delta[k], sgn * Delta[k], eps, flavor)
                model[k, s] = _quadratic_model(C, sigma, gamma, sgn * delta[k], sgn * Delta[k], eps, flavor)
        pair = exact.mean(axis=1)
        resid = (exact - model).mean(axis=1)
        rows.append({
            "eps": eps,
            "formula": formula,
            "mc": float(pair.mean()),
            "mc_se": float(pair.std(ddof=1) / math.sqrt(half)),
            "residual": float(resid.mean()),
            "residual_se": float(resid.std(ddof=1) / math.sqrt(half)),
            "model_mean_minus_formula": float(model.mean() - formula),
        })
    slope = loglog_slope([r["eps"] for r in rows], [r["residual"] for r in rows]).slope
    return rows, slope


def suite_perturbed_w2(seed, budget="full"):
    n = 10_000 if budget == "full" else 1000
    detail = {}
    ok = True
    worst_slope = math.inf
    for flavor in ("wasserstein", "l2"):
        rows, slope = perturbation_scan(seed, n, flavor)
        z = max(abs(r["mc"] - r["formula"]) / r["mc_se"] for r in rows)
        ok = ok and slope >= 2.5 and z <= Z_TOL
        worst_slope = min(worst_slope, slope)
        detail[flavor] = {"rows": rows, "slope": slope, "plain_mc_max_z": z}
    return SuiteResult("perturbed_w2", ok, worst_slope, "residual slope >= 2.5; plain MC within 4 SE", detail)


# 7. Pipeline model: two assembly paths and the nested Monte Carlo

def internal_consistency(seed, n_cases=20):
    rng = task_rng(seed, "verify/pipeline/internal")
    worst = 0.0
    for _ in range(n_cases):
        d = int(rng.integers(1, 6))
        lam = rng.uniform(0.1, 2.0, d)
        sigma = float(rng.uniform(0.3, 1.5))
        tau = float(rng.uniform(0.05, 0.9) * 2.0 / max(lam.max() + sigma**2, 1.0))
        gamma = float(rng.uniform(0.0, 0.9) * (lam.min() + sigma**2))
        N = int(rng.integers(2, 10_000))
        p = PipelineParams(sigma, tau, gamma, N)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        C = (Q * lam) @ Q.T
        for conv in ("minus", "plus", "half", "derived"):
            a = expected_pipeline_error(lam, p, conv).total
            b = expected_w2_perturbed(C, sigma, gamma, perturbation_law_from_sgd(C, sigma, tau, N, conv), 1.0)
            worst = max(worst, abs(a - b) / abs(b))
    return worst


NESTED_SPECTRUM = (1.0, 0.5)
NESTED_PARAMS = PipelineParams(sigma=1.0, tau=5e-3, gamma=0.05, N=200)


def suite_pipeline(seed, budget="full"):
    worst = internal_consistency(seed)
    n_outer = 200 if budget == "full" else 50
    C = np.diag(NESTED_SPECTRUM)
    mc = nested_pipeline_mc(C, NESTED_PARAMS, n_outer=n_outer, seed=seed, path="verify/pipeline/nested")
    model = expected_pipeline_error(NESTED_SPECTRUM, NESTED_PARAMS).total
    z = abs(mc.mean - model) / mc.se
    detail = {"internal_max_rel_error": worst, "nested_mean": mc.mean, "nested_se": mc.se, "model": model,
              "z": z, "mean_bias_term": mean_bias_term(NESTED_SPECTRUM, NESTED_PARAMS), "n_outer": n_outer}
    return SuiteResult("pipeline", worst <= 1e-10 and z <= Z_TOL, z,
                       "assembly rel. error <= 1e-10; nested MC within 4 SE", detail)


# 8. sigma trade-off

TRADEOFF_SPECTRUM = (1.0, 0.5, 0.25)
TRADEOFF_GRID = np.geomspace(0.05, 5.0, 41)


def suite_tradeoff(seed=0, budget="full"):
    """Interior sigma minimum driven by a growing bias term and shrinking variance terms.

    term0 must increase over the whole grid; the tau term and the summed
    variance terms must decrease on the grid up to the minimizer. The
    monotonicity of the 1/N term alone is reported, not asserted.
    """
    scan = sigma_tradeoff_scan(TRADEOFF_SPECTRUM, 1e-3, 1e-2, 1000, TRADEOFF_GRID)
    rows = [r for r in scan.rows if r is not None]
    sig = np.array([s for s, r in zip(scan.sigmas, scan.rows) if r is not None])
    t0 = np.array([r.term0 for r in rows])
    tt = np.array([r.term_tau for r in rows])
    tn = np.array([r.term_N for r in rows])
    var = np.array([r.term_tau + r.term_tauN + r.term_N for r in rows])
    totals = np.array([r.total for r in rows])
    k = int(np.argmin(totals))
    left = sig <= sig[k]
    inc0 = bool(np.all(np.diff(t0) > 0))
    dec_tau = bool(np.all(np.diff(tt[left]) < 0))
    dec_var = bool(np.all(np.diff(var[left]) < 0))
    refined_ok = bool(scan.interior and scan.total_star <= min(totals[k - 1], totals[k + 1]))
    passed = scan.interior and inc0 and dec_tau and dec_var and refined_ok
    detail = {"sigma_star": scan.sigma_star, "total_star": scan.total_star, "interior": scan.interior,
              "term0_increasing": inc0, "term_tau_decreasing_below_min": dec_tau,
              "variance_terms_decreasing_below_min": dec_var,
              "term_N_decreasing_below_min": bool(np.all(np.diff(tn[left]) < 0)),
              "term_N_range": [float(tn.min()), float(tn.max())], "refined_le_neighbours": refined_ok}
    return SuiteResult("tradeoff", passed, scan.sigma_star,
                       "interior minimum; refined total <= grid neighbours; monotone bias and variance terms", detail)


SUITES = {
    "lyapunov": suite_lyapunov,
    "ula": suite_ula,
    "sgd_moments": suite_sgd_moments,
    "isserlis": suite_isserlis,
    "expansions": suite_expansions,
    "perturbed_w2": suite_perturbed_w2,
    "pipeline": suite_pipeline,
    "tradeoff": suite_tradeoff,
}
