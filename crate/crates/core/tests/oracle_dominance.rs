use arblab::battery_env::{discretize_actions, BatteryParams};
use arblab::market_data::{generate_synthetic, MarketRecord, SyntheticConfig};
use arblab::oracle::{dp_optimal, rollout_reward, DpConfig};

fn enumerate(prices: &[f64], soc: f64, p: &BatteryParams) -> f64 {
    let table = discretize_actions(p);
    (0..3usize.pow(prices.len() as u32))
        .map(|code| {
            let mut c = code;
            let seq: Vec<f64> = prices
                .iter()
                .map(|_| {
                    let a = table[c % 3];
                    c /= 3;
                    a
                })
                .collect();
            rollout_reward(soc, &seq, prices, p)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn records() -> Vec<MarketRecord> {
    let cfg = SyntheticConfig {
        length_hours: 2000,
        seed: 11,
        ..Default::default()
    };
    generate_synthetic(&cfg).unwrap().series.records().to_vec()
}

#[test]
fn dp_equals_brute_force_on_short_segments() {
    let p = BatteryParams::default();
    let recs = records();
    for (k, t) in (1..=8).cycle().take(64).enumerate() {
        let start = k * 29;
        let seg = &recs[start..start + t];
        let prices: Vec<f64> = seg.iter().map(|r| r.price).collect();
        for soc in [0.2, 0.5, 0.8, 0.37] {
            let dp = dp_optimal(seg, &p, soc, &DpConfig::default()).unwrap();
            let brute = enumerate(&prices, soc, &p);
            assert!(
                (dp.dispatch.reward - brute).abs() <= 1e-9 * brute.abs().max(1.0),
                "segment {start}+{t} soc {soc}: dp {} brute {brute}",
                dp.dispatch.reward
            );
        }
    }
}
