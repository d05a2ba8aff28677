use chrono::NaiveDate;
use gas_storage::calendar::Month;
use gas_storage::intrinsic::intrinsic_value;
use gas_storage::storage::StorageSpec;
use gas_storage::valuation::{evaluate_policy_forward, fit_policy_backward, MarketScenarios, ValuationConfig};

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2007, 4, 1).unwrap()
}

fn prices<T: gas_storage::Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(5.0 + 2.0 * (i as f64 * std::f64::consts::TAU / n as f64).cos()))
        .collect()
}

fn deterministic_value<T: gas_storage::Real>() -> T {
    let mut spec = StorageSpec::<T>::fast(start());
    spec.end_date = NaiveDate::from_ymd_opt(2007, 5, 1).unwrap();
    let n = spec.grid().unwrap().len();
    let scen = MarketScenarios::deterministic(&prices::<T>(n), 4).unwrap();
    let cfg = ValuationConfig {
        min_paths: 1,
        ..ValuationConfig::default()
    };
    let pol = fit_policy_backward(&scen, &spec, &cfg).unwrap();
    let (rep, _) = evaluate_policy_forward(&pol, &scen).unwrap();
    assert!((rep.extrinsic_value - pol.backward_value()).abs() <= T::lit(1e-3) * pol.backward_value().abs());
    rep.extrinsic_value
}

#[test]
fn valuation_agrees_across_precisions() {
    let a = deterministic_value::<f64>();
    let b = deterministic_value::<f32>();
    assert!(a > 0.0);
    assert!(((b as f64) - a).abs() < 1e-3 * a);
}

#[test]
fn intrinsic_agrees_across_precisions() {
    let curve64: Vec<(Month, f64)> = (0..11)
        .map(|k| (Month::new(2007, 5).unwrap().add_months(k), 7.0 + (k as f64 * 0.6).sin()))
        .collect();
    let curve32: Vec<(Month, f32)> = curve64.iter().map(|&(m, f)| (m, f as f32)).collect();
    let a = intrinsic_value(&curve64, 0.0, &StorageSpec::<f64>::slow(start())).unwrap();
    let b = intrinsic_value(&curve32, 0.0, &StorageSpec::<f32>::slow(start())).unwrap();
    assert!(a.value > 0.0);
    assert!(((b.value as f64) - a.value).abs() < 1e-3 * a.value);
}
