import math

import pytest

from dustgsg.report import CheckResult, MetricRow, aggregate, emit_report, summary_csv, theory_csv


def row(mode, source, frame, pf, sf, pd, sd, dt=0.1):
    return MetricRow("e", mode, dt, frame, source, pf, sf, pd, sd)


def by_key(summaries):
    return {(s.mode, s.delta_tau, s.scope): s for s in summaries}


def test_single_row_summary_equals_row():
    s = by_key(aggregate([row("dust", "vehicle", 0, 30.0, 0.9, 25.0, 0.8)]))
    for scope in ("vehicle", "pooled"):
        x = s[("dust", 0.1, scope)]
        assert (x.psnr_full, x.ssim_full, x.psnr_dyn, x.ssim_dyn, x.rows) == (30.0, 0.9, 25.0, 0.8, 1)
        assert x.gap_psnr_dyn is None


def four_rows():
    return [
        row("dust", "vehicle", 0, 30.0, 0.90, 26.0, 0.80),
        row("dust", "infra", 0, 34.0, 0.94, 30.0, 0.84),
        row("single", "vehicle", 0, 28.0, 0.88, 20.0, 0.70),
        row("single", "infra", 0, 30.0, 0.90, 22.0, 0.72),
    ]


def test_hand_means_and_gaps():
    s = by_key(aggregate(four_rows()))
    d, g = s[("dust", 0.1, "pooled")], s[("single", 0.1, "pooled")]
    assert d.psnr_full == 32.0 and d.psnr_dyn == 28.0 and d.ssim_dyn == pytest.approx(0.82)
    assert g.psnr_full == 29.0 and g.psnr_dyn == 21.0
    assert d.gap_psnr_dyn == 7.0 and g.gap_psnr_dyn == 7.0
    assert s[("dust", 0.1, "infra")].gap_psnr_full == 4.0


def test_inf_rows_are_excluded_and_counted():
    rows = [row("dust", "vehicle", 0, math.inf, 1.0, math.inf, 1.0), row("dust", "vehicle", 1, 30.0, 0.9, 20.0, 0.8)]
    s = by_key(aggregate(rows))[("dust", 0.1, "vehicle")]
    assert s.psnr_full == 30.0 and s.psnr_dyn == 20.0 and s.inf_excluded == 1 and s.rows == 2
    assert s.ssim_full == pytest.approx(0.95)


def test_missing_dynamic_values_are_skipped():
    rows = [row("dust", "infra", 0, 30.0, 0.9, None, None), row("dust", "infra", 1, 32.0, 0.9, 24.0, 0.7)]
    s = by_key(aggregate(rows))[("dust", 0.1, "infra")]
    assert s.psnr_dyn == 24.0


def test_permutation_invariance(rng):
    rows = [row(m, src, f, *rng.uniform(10, 40, 1), *rng.uniform(0, 1, 1), *rng.uniform(10, 40, 1), *rng.uniform(0, 1, 1))
            for m in ("dust", "single") for src in ("vehicle", "infra") for f in range(7)]
    base = summary_csv(aggregate(rows))
    for _ in range(5):
        perm = [rows[i] for i in rng.permutation(len(rows))]
        assert summary_csv(aggregate(perm)) == base


def test_pooled_is_count_weighted_mean_of_sources():
    rows = [row("dust", "vehicle", f, 20.0 + f, 0.5, 10.0 + f, 0.5) for f in range(3)] + [row("dust", "infra", 0, 40.0, 0.5, 30.0, 0.5)]
    s = by_key(aggregate(rows))
    v, i, p = s[("dust", 0.1, "vehicle")], s[("dust", 0.1, "infra")], s[("dust", 0.1, "pooled")]
    assert p.psnr_full == pytest.approx((3 * v.psnr_full + 1 * i.psnr_full) / 4)


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_report_is_byte_stable_and_documents_gap_sign():
    checks = [CheckResult("a", 1e-12, 0.0, 1e-9, True, "note"), CheckResult("bb", 2.0, 2.0, 0.05, False)]
    t1, c1 = emit_report(aggregate(four_rows()), checks)
    t2, c2 = emit_report(aggregate(four_rows()), checks)
    assert t1 == t2 and c1 == c2
    assert "gap = dust - single" in t1
    assert "PASS a" in t1 and "FAIL bb" in t1 and "measured=1e-12" in t1


def test_training_only_report_has_no_checks_section():
    text, _ = emit_report(aggregate(four_rows()))
    assert "Checks" not in text


def test_theory_csv_rows():
    out = theory_csv([CheckResult("x", 1.5, 2.0, 0.1, False)])
    assert out == "name,measured,expected,tolerance,pass\nx,1.5,2,0.1,fail\n"
