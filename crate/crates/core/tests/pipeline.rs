use iotsim::energy::PowerSample;
use iotsim::harness::{compare, read_csv, run_scenario, write_csv, Protocol, ScenarioConfig};
use iotsim::powertrace::interval_ticks;
use proptest::prelude::*;

fn avg(cpu: f64, lpm: f64, tx: f64, rx: f64) -> PowerSample {
    PowerSample::from_components(100.0, cpu, lpm, tx, rx)
}

fn reference_averages() -> Vec<(String, PowerSample)> {
    vec![
        (
            "mqtt".into(),
            avg(0.168315125, 0.000296042, 0.375, 0.445356079),
        ),
        (
            "mqtt-sn".into(),
            avg(0.242376709, 0.000295026, 0.113433838, 0.44496167),
        ),
        (
            "coap".into(),
            avg(0.276187317, 0.000292943, 0.139736306, 0.475882843),
        ),
        (
            "http".into(),
            avg(0.156257629, 0.00029363, 0.523361206, 0.703738403),
        ),
    ]
}

#[test]
fn reference_averages_rank_and_delta() {
    let r = compare(&reference_averages()).unwrap();
    assert_eq!(r.ranking, ["mqtt-sn", "coap", "mqtt", "http"]);
    assert_eq!(r.delta("mqtt-sn", "mqtt").unwrap().total_pct, -19.0);
}

proptest! {
    #[test]
    fn ranking_ignores_input_order(seed in any::<u64>()) {
        let mut inputs = reference_averages();
        let n = inputs.len();
        for i in (1..n).rev() {
            inputs.swap(i, (seed >> (i * 8)) as usize % (i + 1));
        }
        prop_assert_eq!(compare(&inputs).unwrap().ranking, ["mqtt-sn", "coap", "mqtt", "http"]);
    }
}

#[test]
fn trace_csv_roundtrip_preserves_rows() {
    let dir = tempfile::tempdir().unwrap();
    for p in Protocol::ALL {
        let r = run_scenario(&ScenarioConfig::new(p)).unwrap();
        let rows: Vec<PowerSample> = r.client().rows.iter().map(|row| row.power).collect();
        let path = dir.path().join(format!("{p}.csv"));
        write_csv(&path, &rows).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.rows.len(), rows.len());
        for (a, b) in back.rows.iter().zip(&rows) {
            assert_eq!(a.interval_end_s, b.interval_end_s);
            assert!((a.total_mw - b.total_mw).abs() < 1e-8);
        }
        let want = r.client().average().unwrap().total_mw;
        assert!((back.avg.total_mw - want).abs() < 1e-8);
    }
}

#[test]
fn conservation_holds_with_losses_and_many_clients() {
    for p in Protocol::ALL {
        let mut cfg = ScenarioConfig::new(p);
        cfg.clients = 3;
        cfg.link.tx_success = 0.8;
        cfg.seed = 7;
        let r = run_scenario(&cfg).unwrap();
        let ticks = interval_ticks(cfg.interval_s as f64, cfg.currents.rtimer_hz);
        for node in r.clients.iter().chain([&r.server]) {
            assert_eq!(node.rows.len(), 10);
            for row in &node.rows {
                assert_eq!(row.deltas.cpu + row.deltas.lpm, ticks);
                assert!(row.deltas.tx + row.deltas.rx <= ticks);
            }
            assert_eq!(
                node.final_counters.tx + node.inflight_tx,
                node.traffic.airtime_sent
            );
        }
    }
}
