mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stcar::forecast::{coverage, prediction_interval, ForecastRow, IntervalMethod};
use stcar::graph::{car_precision, EnvelopeCholesky};
use stcar::model::{linear_predictor, log_joint, sample_prior, Parameterization, Parameters, Target};
use stcar::posterior::{
    conditional_effects, equal_tail, hpdi, prob_greater, standardize, summarize_column, EffectCoefficients, EffectVariable,
    EffectsConfig,
};
use stcar::synth::{reference_truth, simulate_dataset, SimConfig, Truth};
use stcar::{ArealGraph, Dataset, ModelSpec, ModelVariant};

fn variant() -> impl Strategy<Value = ModelVariant> {
    prop::sample::select(ModelVariant::ALL.to_vec())
}

fn parameterization() -> impl Strategy<Value = Parameterization> {
    prop::sample::select(vec![Parameterization::Centered, Parameterization::NonCentered, Parameterization::Shifted])
}

fn chain_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..7, 1..4)
}

/// Prior draw with effects for a small fixture under calibration priors.
fn prior_draw(spec: &ModelSpec, ds: &Dataset, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior(spec, &ds.graph, ds.n_years, ds.n_covariates(), &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_det_decreases_in_lambda(sizes in chain_sizes(), a in 0.0f64..0.999, b in 0.0f64..0.999) {
        prop_assume!((a - b).abs() > 1e-6);
        let g = ArealGraph::chains(&sizes, None).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(g.spectral().log_det(lo) > g.spectral().log_det(hi));
        prop_assert!(g.spectral().log_det_derivative(lo) < 0.0);
    }

    #[test]
    fn car_precision_is_positive_definite(sizes in chain_sizes(), lambda in 0.0f64..0.9999, sigma2 in 0.01f64..10.0) {
        let g = ArealGraph::chains(&sizes, None).unwrap();
        let q = car_precision(&g, lambda, sigma2).unwrap();
        let chol = EnvelopeCholesky::factor(&q).unwrap();
        prop_assert!((0..chol.dim()).all(|i| chol.pivot(i) > 0.0));
        let want = g.spectral().log_det(lambda) - g.n_sections() as f64 * sigma2.ln();
        prop_assert!((chol.log_det() - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn constrain_inverts_unconstrain(v in variant(), pz in parameterization(), seed in 0u64..1000) {
        let (ds, _) = common::small(v, &[2, 3, 2], 3, seed);
        let spec = ModelSpec::new(v).with_priors(stcar::synth::calibration_priors()).with_parameterization(pz);
        let p = prior_draw(&spec, &ds, seed + 1);
        let target = Target::new(spec, &ds);
        let back = target.constrain(&target.unconstrain(&p).unwrap()).unwrap();
        let (a, b) = (p.to_flat(target.layout()).unwrap(), back.to_flat(target.layout()).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{} vs {}", x, y);
        }
        if v == ModelVariant::M3b {
            let r = back.r_full();
            prop_assert_eq!(r[2], -r[0] - r[1]);
            prop_assert!(back.rho_groups().iter().all(|&rho| rho > 0.0 && rho < 1.0));
        }
    }

    /// Log-factorial terms are dropped, so one more count adds `ln μ`.
    #[test]
    fn extra_count_adds_log_rate(v in variant(), seed in 0u64..1000, cell in 0usize..21) {
        let (ds, _) = common::small(v, &[2, 3, 2], 3, seed);
        let spec = ModelSpec::new(v).with_priors(stcar::synth::calibration_priors());
        let p = prior_draw(&spec, &ds, seed + 7);
        let mut bumped = ds.clone();
        prop_assume!(bumped.counts[cell].is_some());
        *bumped.counts[cell].as_mut().unwrap() += 1;
        let (k, t) = (cell % ds.n_sections(), cell / ds.n_sections());
        let base = log_joint(&p, &ds, &spec).unwrap();
        let diff = log_joint(&p, &bumped, &spec).unwrap() - base;
        let eta = linear_predictor(&p, &ds, k, t).unwrap();
        // The difference of two totals inherits their rounding, a few ulp of |log joint|.
        let tol = 1e-9 * eta.abs().max(1.0) + 64.0 * f64::EPSILON * base.abs();
        prop_assert!((diff - eta).abs() <= tol, "{} vs {} (log joint {})", diff, eta, base);
    }

    #[test]
    fn log_joint_ignores_section_labels(v in variant(), seed in 0u64..1000, perm_seed in any::<u64>()) {
        let (ds, _) = common::small(v, &[2, 3, 2], 3, seed);
        let spec = ModelSpec::new(v).with_priors(stcar::synth::calibration_priors());
        let p = prior_draw(&spec, &ds, seed + 3);
        let (pds, pp) = relabel(&ds, &p, perm_seed);
        let (a, b) = (log_joint(&p, &ds, &spec).unwrap(), log_joint(&pp, &pds, &spec).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn hpdi_is_no_wider_than_equal_tail(x in prop::collection::vec(-50.0f64..50.0, 50..400), level in 0.5f64..0.99) {
        let (hl, hh) = hpdi(&x, level).unwrap();
        let inside = x.iter().filter(|&&v| hl <= v && v <= hh).count();
        prop_assert!(inside as f64 >= level * x.len() as f64);
        // The central window holding the same number of draws.
        let mut s = x.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let m = (level * n as f64).ceil() as usize;
        let start = (n - m) / 2;
        prop_assert!(hh - hl <= s[start + m - 1] - s[start]);
        // Interpolated quantiles agree with that window to within one draw gap.
        let (el, eh) = equal_tail(&x, level).unwrap();
        let gap = s.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        prop_assert!(hh - hl <= eh - el + 2.0 * gap);
    }

    #[test]
    fn summary_rows_are_ordered(x in prop::collection::vec(-50.0f64..50.0, 50..300), level in 0.5f64..0.99) {
        let r = summarize_column("x", &x, level).unwrap();
        prop_assert!(r.q_low <= r.median && r.median <= r.q_high);
        prop_assert!(r.hpdi_low <= r.median && r.median <= r.hpdi_high);
    }

    #[test]
    fn effect_bands_hold_the_median(
        coefs in prop::collection::vec((-1.0f64..1.0, -2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0), 50..120),
        marsh in any::<bool>(),
    ) {
        let draws: Vec<EffectCoefficients> = coefs
            .iter()
            .map(|&(t, m, i, g)| EffectCoefficients { intercept: -4.0, turbidity: t, marsh: m, interaction: i, management: g })
            .collect();
        let vary = if marsh { EffectVariable::Marsh } else { EffectVariable::Turbidity };
        let cfg = EffectsConfig { grid_size: 7, ..EffectsConfig::new(vary) };
        let table = conditional_effects(&draws, effects_fixture(), &cfg).unwrap();
        for r in &table.rows {
            prop_assert!(r.low <= r.median && r.median <= r.high && r.low > 0.0);
        }
    }

    #[test]
    fn prob_greater_is_complementary(pairs in prop::collection::vec((-3i32..3, -3i32..3), 1..200)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let s = prob_greater(&a, &b).unwrap() + prob_greater(&b, &a).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_positive_coefficient_raises_the_effect(
        c in 0.01f64..5.0, scale in 1.01f64..4.0, marsh in 0.01f64..1.0, turb in -3.0f64..0.0, inter in -2.0f64..2.0,
    ) {
        let base = EffectCoefficients { intercept: -4.0, turbidity: 0.5, marsh: c, interaction: inter, management: -0.3 };
        let bigger = EffectCoefficients { marsh: c * scale, ..base };
        prop_assert!(bigger.log_mu(turb, marsh, 7.0, true) > base.log_mu(turb, marsh, 7.0, true));
        // Slope in marsh is the marsh coefficient plus the interaction at this turbidity.
        let slope = c + inter * turb;
        let step = base.log_mu(turb, marsh + 0.1, 7.0, true) - base.log_mu(turb, marsh, 7.0, true);
        prop_assert!((step - 0.1 * slope).abs() < 1e-12);
    }

    #[test]
    fn standardized_values_have_unit_moments(x in prop::collection::vec(-1e3f64..1e3, 2..60)) {
        let z = standardize(&x);
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let var = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!(m.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn prediction_interval_holds_its_mass_and_median(
        draws in prop::collection::vec(0u64..60, 500..900),
        level in 0.5f64..0.99,
        equal in any::<bool>(),
    ) {
        let method = if equal { IntervalMethod::EqualTail } else { IntervalMethod::Hpd };
        let (lo, hi) = prediction_interval(&draws, level, method).unwrap();
        prop_assert!(lo <= hi);
        let mass = draws.iter().filter(|&&y| lo <= y && y <= hi).count() as f64 / draws.len() as f64;
        prop_assert!(mass >= level);
        let mut s = draws.clone();
        s.sort_unstable();
        let median = s[(s.len() - 1) / 2];
        prop_assert!(lo <= median && median <= hi);
    }

    #[test]
    fn coverage_ignores_row_order(flags in prop::collection::vec(prop::option::of(any::<bool>()), 1..40), shift in 0usize..40) {
        prop_assume!(flags.iter().any(|f| f.is_some()));
        let rows: Vec<ForecastRow> = flags
            .iter()
            .enumerate()
            .map(|(i, f)| ForecastRow { section: i.to_string(), observed: f.map(|_| 1), median: 1, low: 0, high: 2, inside: *f })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(shift % len);
        prop_assert_eq!(coverage(&rows).unwrap(), coverage(&shuffled).unwrap());
        let inside = flags.iter().flatten().filter(|&&b| b).count() as f64;
        prop_assert_eq!(coverage(&rows).unwrap(), inside / flags.iter().flatten().count() as f64);
    }
}

/// Renumbers sections by a random permutation, keeping tributary order.
fn relabel(ds: &Dataset, p: &Parameters, seed: u64) -> (Dataset, Parameters) {
    use rand::seq::SliceRandom;
    let g = &ds.graph;
    let kk = g.n_sections();
    let mut order: Vec<usize> = (0..kk).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // New section i is old section order[i].
    let ids: Vec<String> = order.iter().map(|&o| g.ids()[o].clone()).collect();
    let groups: Vec<String> = order.iter().map(|&o| g.group_labels()[g.group_of(o)].clone()).collect();
    let edges: Vec<(String, String)> =
        g.edges().iter().map(|&(a, b)| (g.ids()[a].clone(), g.ids()[b].clone())).collect();
    let graph = ArealGraph::new(&ids, &edges, &groups, g.group_labels()).unwrap();
    let pc = ds.n_covariates();
    let (mut counts, mut offsets, mut design) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..ds.n_years {
        for &o in &order {
            let c = ds.cell(o, t);
            counts.push(ds.counts[c]);
            offsets.push(ds.offsets[c]);
            design.extend_from_slice(ds.covariates(c));
        }
    }
    assert_eq!(design.len(), ds.n_cells() * pc);
    let names = ds.covariate_names.clone();
    let pds = Dataset::new(graph, ds.first_year, ds.n_years, names, counts, offsets, design).unwrap();
    let permute = |v: &[f64]| -> Vec<f64> {
        (0..v.len() / kk).flat_map(|t| order.iter().map(move |&o| v[t * kk + o])).collect()
    };
    let mut pp = p.clone();
    pp.theta = permute(&p.theta);
    pp.phi = permute(&p.phi);
    (pds, pp)
}

fn effects_fixture() -> &'static Dataset {
    static DS: std::sync::OnceLock<Dataset> = std::sync::OnceLock::new();
    DS.get_or_init(|| {
        let sim = SimConfig {
            group_sizes: vec![3, 2, 2],
            n_years: 4,
            ..SimConfig::desk(ModelVariant::M2, Truth::Hyperparameters(reference_truth(ModelVariant::M2, 3)), 9)
        };
        simulate_dataset(&sim).unwrap().0
    })
}
