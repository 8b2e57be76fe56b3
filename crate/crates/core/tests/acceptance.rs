//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swpower::design::DesignSpec;
use swpower::estimand::Estimand;
use swpower::gls::{power_from_se, vc_from_icc_cac, CorrelationSpec};
use swpower::model::{ModelSpec, TimeTrend};
use swpower::search::{calibrate_effect, contrast_se, required_individuals, ssr, Axis, SearchProblem, SearchResult};
use swpower::simulate::{mc_power, CalendarTrend, EffectCurve, FitMethod, McPower, SimScenario};
use swpower::twoseq::{add1c_estimators, add1t_invariance_check, base_estimators, gls_estimators, TwoSeqCells, TwoSeqDesign};

struct Outcome {
    pass: bool,
    detail: String,
}

fn problem(s: u32, c: u32, k: u32, model: ModelSpec, estimand: Estimand, correlation: CorrelationSpec) -> SearchProblem {
    SearchProblem {
        design: DesignSpec::standard(s, c, k),
        model,
        estimand,
        correlation,
        effect: 0.2,
        target_power: 0.9,
        alpha: 0.05,
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn show(r: &SearchResult) -> String {
    match r {
        SearchResult::Solved { n, .. } => n.to_string(),
        SearchResult::Infeasible { limiting_power } => format!("infeasible(limit {limiting_power:.3})"),
    }
}

fn required_k(s: u32, c: u32, e: Estimand) -> SearchResult {
    required_individuals(&problem(s, c, 1, ModelSpec::eti(), e, CorrelationSpec::new(0.05, 0.75))).unwrap()
}

fn criterion_1() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (e, want) in [(Estimand::tate(0, 6), 1.7), (Estimand::tate(0, 5), 1.4), (Estimand::tate(0, 3), 1.1)] {
        let corr = CorrelationSpec::new(0.05, 0.75);
        let r = ssr(
            &problem(6, 1, 5, ModelSpec::it(), e, corr),
            &problem(6, 1, 5, ModelSpec::eti(), e, corr),
            Axis::Clusters,
        )
        .unwrap();
        let ratio = r.ratio().unwrap_or(f64::NAN);
        pass &= within(ratio, want, 0.15);
        parts.push(format!("{e} SSR {ratio:.3} (want {want} +/- 0.15)"));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (e, want, tol) in [(Estimand::tate(0, 8), 10, 2), (Estimand::tate(0, 5), 5, 1), (Estimand::tate(3, 8), 20, 3)] {
        let r = required_k(8, 4, e);
        pass &= r.n().is_some_and(|n| n.abs_diff(want) <= tol);
        parts.push(format!("{e} K {} (want {want} +/- {tol})", show(&r)));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (e, want, tol) in [(Estimand::pte(1), 6, 1), (Estimand::pte(6), 36, 4)] {
        let r = required_k(8, 4, e);
        pass &= r.n().is_some_and(|n| n.abs_diff(want) <= tol);
        parts.push(format!("{e} K {} (want {want} +/- {tol})", show(&r)));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn info_clusters_per_sequence() -> String {
    let parts: Vec<String> = [Estimand::tate(0, 8), Estimand::tate(0, 5), Estimand::tate(3, 8), Estimand::pte(1), Estimand::pte(6)]
        .iter()
        .map(|e| format!("{e} {}", show(&required_k(8, 9, *e))))
        .collect();
    format!("8 sequences x 9 clusters: {}", parts.join(", "))
}

fn criterion_4() -> Outcome {
    let r = required_k(4, 4, Estimand::tate(2, 4));
    Outcome {
        pass: matches!(r, SearchResult::Infeasible { .. }),
        detail: format!("TATE(2,4) on 4 sequences x 4 clusters: {}", show(&r)),
    }
}

/// Six sequences, four clusters each, CAC 1, effect calibrated to 70% power
/// with 50 individuals per cell.
fn extra_period_problem() -> SearchProblem {
    let mut p = problem(6, 4, 50, ModelSpec::eti(), Estimand::tate(0, 6), CorrelationSpec::new(0.05, 1.0));
    p.target_power = 0.7;
    p.effect = calibrate_effect(&p).unwrap();
    p
}

fn power_with(p: &SearchProblem, design: DesignSpec) -> f64 {
    let mut q = p.clone();
    q.design = design;
    q.power().unwrap().power
}

fn criterion_5() -> Outcome {
    let p = extra_period_problem();
    let base = p.power().unwrap().power;
    let start1 = power_with(&p, p.design.clone().with_extra_start(1));
    let start3 = power_with(&p, p.design.clone().with_extra_start(3));
    let end3 = power_with(&p, p.design.clone().with_extra_end(3));
    let gain = end3 - base;
    let pass = within(start1, 0.78, 0.02) && within(start3, 0.88, 0.02) && gain < 0.03;
    Outcome {
        pass,
        detail: format!(
            "base {base:.4}; +1 start {start1:.4} (want 0.78 +/- 0.02); +3 start {start3:.4} (want 0.88 +/- 0.02); +3 end gain {gain:.4} (want < 0.03)"
        ),
    }
}

fn criterion_6() -> (Outcome, String) {
    let p = extra_period_problem();
    let start1 = power_with(&p, p.design.clone().with_extra_start(1));
    let doubled = power_with(&p, p.design.clone().with_baseline_multiplier(2.0));
    let diff = (start1 - doubled).abs();

    let mut q = p.clone();
    q.correlation = CorrelationSpec::new(0.05, 0.75);
    let start1_q = power_with(&q, q.design.clone().with_extra_start(1));
    let doubled_q = power_with(&q, q.design.clone().with_baseline_multiplier(2.0));
    (
        Outcome {
            pass: diff <= 1e-8,
            detail: format!("CAC 1: +1 start {start1:.10} vs baseline x2 {doubled:.10} (|diff| {diff:.2e}, want <= 1e-8)"),
        },
        format!("CAC 0.75: +1 start {start1_q:.6} vs baseline x2 {doubled_q:.6}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut invariance_ok = 0;
    let mut n = 0;
    for i in 0..1000 {
        let phi = [0.0, 0.25, 0.5, 0.9][i % 4];
        let k = rng.random_range(1..30);
        let sigma2 = rng.random_range(0.5..2.0);
        let tau2 = phi / (1.0 - phi) * sigma2 / k as f64;
        let mut draw = |len: usize| -> [Vec<f64>; 2] {
            [(0..len).map(|_| rng.random_range(-5.0..5.0)).collect(), (0..len).map(|_| rng.random_range(-5.0..5.0)).collect()]
        };
        let base = TwoSeqCells::new(TwoSeqDesign::Base, draw(3), k, tau2, sigma2).unwrap();
        let a = base_estimators(&base).unwrap();
        let g = gls_estimators(&base).unwrap();
        worst = worst.max((a.0 - g.0).abs()).max((a.1 - g.1).abs());

        let add_c = TwoSeqCells::new(TwoSeqDesign::AddControl, draw(4), k, tau2, sigma2).unwrap();
        let a = add1c_estimators(&add_c).unwrap();
        let g = gls_estimators(&add_c).unwrap();
        worst = worst.max((a.0 - g.0).abs()).max((a.1 - g.1).abs());

        let add_t = TwoSeqCells::new(TwoSeqDesign::AddTreatment, draw(4), k, tau2, sigma2).unwrap();
        invariance_ok += add1t_invariance_check(&add_t).unwrap() as usize;
        n += 1;
    }
    Outcome {
        pass: worst <= 1e-10 && invariance_ok == n,
        detail: format!("{n} instances; max |closed form - GLS| {worst:.2e} (want <= 1e-10); extra-treatment invariance {invariance_ok}/{n}"),
    }
}

fn criterion_8() -> Outcome {
    let s = 6;
    let vc = vc_from_icc_cac(&CorrelationSpec::new(0.05, 0.75)).unwrap();
    let e = Estimand::tate(0, s);
    let se = contrast_se(&DesignSpec::standard(s, 4, 5), &ModelSpec::eti(), &e, &vc).unwrap();
    let immediate = EffectCurve::Immediate { delta: 0.2 }.estimand_value(&e, s);
    let jump = EffectCurve::JumpLinear { start: 0.1, end: 0.3 }.estimand_value(&e, s);
    let pa = power_from_se(immediate, se, 0.05).unwrap().power;
    let pb = power_from_se(jump, se, 0.05).unwrap().power;
    Outcome {
        pass: pa == pb,
        detail: format!("TATE(0,6) values {immediate:?} vs {jump:?}; power {pa:?} vs {pb:?} (want identical)"),
    }
}

fn criterion_9() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for s in [2, 3, 4, 6, 8, 10] {
        for icc in [0.001, 0.01, 0.05, 0.1, 0.3] {
            for cac in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let vc = vc_from_icc_cac(&CorrelationSpec::new(icc, cac)).unwrap();
                let design = DesignSpec::standard(s, 3, 10);
                let e = Estimand::tate(0, s);
                let cat = contrast_se(&design, &ModelSpec::it(), &e, &vc).unwrap();
                let lin = contrast_se(&design, &ModelSpec::it().with_time(TimeTrend::Linear), &e, &vc).unwrap();
                worst = worst.max((cat * cat - lin * lin).abs());
                n += 1;
            }
        }
    }
    Outcome { pass: worst <= 1e-8, detail: format!("{n} grid points; max |var cat - var lin| {worst:.2e} (want <= 1e-8)") }
}

#[allow(clippy::too_many_arguments)]
fn scenario(s: u32, c: u32, k: u32, corr: CorrelationSpec, curve: EffectCurve, trend: CalendarTrend, reps: u32, seed: u64) -> SimScenario {
    SimScenario {
        layout: DesignSpec::standard(s, c, k).build().unwrap(),
        curve,
        trend,
        vc: vc_from_icc_cac(&corr).unwrap(),
        reps,
        seed,
        alpha: 0.05,
    }
}

fn criterion_10() -> Outcome {
    let corr = CorrelationSpec::new(0.05, 0.75);
    let trend = CalendarTrend::Linear { from: 0.0, to: 1.0 };
    let cases = [
        ("IT", ModelSpec::it(), EffectCurve::Immediate { delta: 0.2 }, Estimand::tate(0, 6)),
        ("ETI", ModelSpec::eti(), EffectCurve::JumpLinear { start: 0.1, end: 0.3 }, Estimand::tate(0, 6)),
        (
            "DCT(2)",
            ModelSpec::dct(2),
            EffectCurve::WashoutConstant { washout: 2, ramp: vec![0.05, 0.1], delta: 0.25 },
            Estimand::tate(2, 6),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, model, curve, e)) in cases.into_iter().enumerate() {
        let sc = scenario(6, 4, 5, corr, curve.clone(), trend.clone(), 2000, 1000 + i as u64);
        let truth = curve.estimand_value(&e, 6);
        let se = contrast_se(&DesignSpec::standard(6, 4, 5), &model, &e, &sc.vc).unwrap();
        let analytic = power_from_se(truth, se, 0.05).unwrap().power;
        let mc = mc_power(&sc, &model, &e, &FitMethod::KnownVariance(sc.vc)).unwrap();
        let ok = (mc.power - analytic).abs() <= 3.0 * mc.mc_standard_error;
        pass &= ok;
        parts.push(format!("{name} {e} mc {:.4} +/- {:.4} vs analytic {analytic:.4}", mc.power, mc.mc_standard_error));
    }
    let sc = scenario(6, 4, 5, corr, EffectCurve::Immediate { delta: 0.0 }, trend, 2000, 1100);
    let null = mc_power(&sc, &ModelSpec::it(), &Estimand::tate(0, 6), &FitMethod::KnownVariance(sc.vc)).unwrap();
    let null_se = (0.05f64 * 0.95 / 2000.0).sqrt();
    pass &= (null.power - 0.05).abs() <= 3.0 * null_se;
    parts.push(format!("null rejection {:.4} vs alpha 0.05 (3 se = {:.4})", null.power, 3.0 * null_se));
    Outcome { pass, detail: parts.join("; ") }
}

fn diff_se(a: &McPower, b: &McPower) -> f64 {
    (a.mc_standard_error.powi(2) + b.mc_standard_error.powi(2)).sqrt()
}

fn criterion_11() -> Outcome {
    let corr = CorrelationSpec::new(0.01, 0.75);
    let curve = EffectCurve::WashoutConstant { washout: 1, ramp: vec![0.1], delta: 0.2 };
    let sc = scenario(6, 4, 5, corr, curve, CalendarTrend::Linear { from: 0.0, to: 1.0 }, 2000, 1200);
    let e = Estimand::tate(1, 6);
    let run = |m: ModelSpec| mc_power(&sc, &m, &e, &FitMethod::Reml).unwrap();
    let eti = run(ModelSpec::eti());
    let drop = run(ModelSpec::it_drop_washout(1));
    let dct = run(ModelSpec::dct(1));
    let pass = eti.power < drop.power && dct.power - drop.power >= -3.0 * diff_se(&dct, &drop);
    let failures = eti.failures + drop.failures + dct.failures;
    Outcome {
        pass,
        detail: format!(
            "{e}, washout 1: ETI {:.4} < IT-drop {:.4} <= DCT {:.4} (DCT - IT-drop {:+.4}, 3 se {:.4}); {failures} failed fits",
            eti.power,
            drop.power,
            dct.power,
            dct.power - drop.power,
            3.0 * diff_se(&dct, &drop)
        ),
    }
}

fn criterion_12() -> Outcome {
    let corr = CorrelationSpec::new(0.01, 0.75);
    let mut pass = true;
    let mut parts = Vec::new();
    let mut margins = Vec::new();
    for s in [12u32, 24] {
        let curve = EffectCurve::JumpLinear { start: 0.1, end: 0.3 };
        let sc = scenario(s, 4, 5, corr, curve, CalendarTrend::Linear { from: 0.0, to: 1.0 }, 1000, 1300 + s as u64);
        let tate = Estimand::tate(0, s);
        let run = |m: ModelSpec, e: &Estimand| mc_power(&sc, &m, e, &FitMethod::Reml).unwrap();
        let cat = run(ModelSpec::eti(), &tate);
        let lin = run(ModelSpec::eti().with_time(TimeTrend::Linear), &tate);
        let ncs = run(ModelSpec::ncs(4), &tate);
        for (a, b) in [(&cat, &lin), (&cat, &ncs), (&lin, &ncs)] {
            pass &= (a.power - b.power).abs() <= 3.0 * diff_se(a, b);
        }
        let pte = Estimand::pte(s);
        let eti_pte = run(ModelSpec::eti(), &pte);
        let ncs_pte = run(ModelSpec::ncs(4), &pte);
        let margin = ncs_pte.power - eti_pte.power;
        pass &= margin > 0.0;
        margins.push(margin);
        parts.push(format!(
            "S={s}: TATE ETI-cat {:.3} ETI-lin {:.3} NCS(4) {:.3}; PTE({s}) NCS(4) {:.3} vs ETI {:.3}",
            cat.power, lin.power, ncs.power, ncs_pte.power, eti_pte.power
        ));
    }
    pass &= margins[1] > margins[0];
    parts.push(format!("PTE margin {:.3} -> {:.3}", margins[0], margins[1]));
    Outcome { pass, detail: parts.join("; ") }
}

fn main() {
    let mut failed = Vec::new();
    let mut record = |n: u32, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {n:>2}: {} {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    };
    record(1, &criterion_1);
    record(2, &criterion_2);
    record(3, &criterion_3);
    println!("    info: {}", info_clusters_per_sequence());
    record(4, &criterion_4);
    record(5, &criterion_5);
    let (six, six_info) = criterion_6();
    record(6, &|| Outcome { pass: six.pass, detail: six.detail.clone() });
    println!("    info: {six_info}");
    record(7, &criterion_7);
    record(8, &criterion_8);
    record(9, &criterion_9);
    record(10, &criterion_10);
    record(11, &criterion_11);
    record(12, &criterion_12);
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
