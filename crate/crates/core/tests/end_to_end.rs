use chrono::NaiveDate;
use gas_storage::calendar::{ExpiryRule, Month};
use gas_storage::f64::{Experiment, GabillonParams, SpotParams, StorageSpec};
use gas_storage::hedging::DeltaKind;
use gas_storage::pipeline::Seeds;
use gas_storage::valuation::ValuationConfig;

fn experiment(slow: bool, n_paths: usize) -> Experiment {
    let start = NaiveDate::from_ymd_opt(2007, 4, 1).unwrap();
    let initial_curve: Vec<(Month, f64)> = (0..14)
        .map(|k| {
            let m = Month::new(2007, 5).unwrap().add_months(k);
            let phase = std::f64::consts::TAU * (m.month() as f64 - 1.0) / 12.0;
            (m, 7.5 + 1.2 * phase.cos())
        })
        .collect();
    Experiment {
        spec: if slow { StorageSpec::slow(start) } else { StorageSpec::fast(start) },
        futures: GabillonParams::reference(),
        initial_curve,
        s0: 7.0,
        spot: SpotParams::reference_model1(),
        rule: ExpiryRule::default(),
        n_paths,
        valuation: ValuationConfig {
            node_cap: 51,
            min_paths: 100,
        },
        hedge: DeltaKind::Volume,
    }
}

#[test]
fn seeds_must_differ() {
    assert!(Seeds::new(3, 3).is_err());
}

#[test]
fn slow_preset_value_and_hedge() {
    let exp = experiment(true, 600);
    let r = exp.run(Seeds::new(11, 12).unwrap()).unwrap();
    assert!(r.report.extrinsic_value > 0.0);
    assert!(r.report.std_hedged.unwrap() < r.report.std_unhedged);
    let again = exp.run(Seeds::new(11, 12).unwrap()).unwrap();
    assert_eq!(r.report.per_path_wealth, again.report.per_path_wealth);
    assert_eq!(r.hedged_wealth, again.hedged_wealth);
}
