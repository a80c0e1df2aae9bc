use scripsim::simulator::{exact_chain, run_simulation, SimConfig};
use scripsim::{AgentType, Population, StrategyProfile, TypeShare};

fn standard() -> AgentType {
    AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0)
}

#[test]
fn small_system_matches_exact_chain() {
    let p = Population::homogeneous(standard(), 3).unwrap();
    let profile = StrategyProfile(vec![2]);
    let chain = exact_chain(&p, &profile, 2).unwrap();
    let exact = chain.marginal_f64();

    // Independent replications give the standard error of each marginal.
    let reps = 24;
    let runs: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            let mut cfg = SimConfig::new(p.clone(), profile.clone(), 2.0 / 3.0);
            cfg.rounds = 30_000;
            cfg.burn_in = 1_000;
            cfg.record_interval = 1;
            cfg.seed = 1000 + r;
            let res = run_simulation(cfg).unwrap();
            assert_eq!(res.total_money, 2);
            res.distribution
        })
        .collect();
    for (i, &target) in exact.iter().enumerate() {
        let xs: Vec<f64> = runs
            .iter()
            .map(|d| d.get(i).copied().unwrap_or(0.0))
            .collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - target).abs() <= 3.0 * se + 1e-9,
            "money {i}: {mean} vs {target} (se {se})"
        );
    }
}

#[test]
fn free_service_rate_matches_altruist_share() {
    let altruists = 0.1;
    let p = Population::with_nonstandard(
        vec![TypeShare {
            agent: standard(),
            fraction: 1.0 - altruists,
        }],
        1000,
        0.0,
        altruists,
        None,
    )
    .unwrap();
    let mut cfg = SimConfig::new(p, StrategyProfile(vec![5]), 2.0);
    cfg.rounds = 1_000_000;
    cfg.burn_in = 100_000;
    let res = run_simulation(cfg).unwrap();
    let predicted = altruists / (altruists + res.mean_willing_standard);
    assert!(
        (res.a_hat - predicted).abs() <= 0.02,
        "a_hat {} vs {predicted}",
        res.a_hat
    );
    assert!(res.free_trades > 0 && res.paid_trades > 0);
}

#[test]
fn welfare_counts_each_served_request() {
    let p = Population::homogeneous(standard(), 200).unwrap();
    let mut cfg = SimConfig::new(p, StrategyProfile(vec![4]), 1.5);
    cfg.rounds = 200_000;
    cfg.burn_in = 10_000;
    let res = run_simulation(cfg).unwrap();
    assert_eq!(
        res.requests,
        res.paid_trades + res.free_trades + res.unserved
    );
    assert_eq!(res.free_trades, 0);
    assert_eq!(res.final_money.iter().sum::<u64>(), res.total_money);
}
