use mlgrf_core::mcmc::read_level_csv;
use mlgrf_core::ChainRow;
use mlgrf_core::{
    generate_observations, run_chains, summarize, ChainConfig, CoarsestSampler, DarcyPosterior, HierarchicalModel,
    ObservationSet, PriorSpec,
};

fn prior(coarsest: CoarsestSampler) -> PriorSpec {
    PriorSpec {
        h0: 0.25,
        finest: 1,
        correlation_length: 0.3,
        sigma2: 0.1,
        coarsest,
    }
}

#[test]
fn observations_survive_json_round_trip() {
    let data = generate_observations(&prior(CoarsestSampler::Spde), 0.1, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.json");
    data.observations.write(&path).unwrap();
    assert_eq!(ObservationSet::read(&path).unwrap(), data.observations);
}

#[test]
fn chains_summary_and_csv_round_trip() {
    let p = prior(CoarsestSampler::Kl { modes: 8 });
    let data = generate_observations(&p, 0.1, 5).unwrap();
    let model = DarcyPosterior::new(p.build_sampler().unwrap(), data.observations).unwrap();
    assert_eq!(model.num_levels(), 2);
    assert_eq!(model.noise_dim(0), 8);

    let cfg = ChainConfig::uniform(2, 0.3, 150, 9);
    let records: Vec<_> = run_chains(&model, &cfg, 3).into_iter().map(|r| r.unwrap()).collect();
    let again: Vec<_> = run_chains(&model, &cfg, 3).into_iter().map(|r| r.unwrap()).collect();
    for (a, b) in records.iter().zip(&again) {
        let strip = |r: &mlgrf_core::ChainRecord| r.rows.iter().map(|x| (x.q, x.y, x.accepted)).collect::<Vec<_>>();
        assert_eq!(strip(a), strip(b));
    }

    let summary = summarize(&records, 0.1, 9, "hash").unwrap();
    assert_eq!(summary.levels, vec![0, 1]);
    assert_eq!(summary.chains, 3);
    assert!(summary.acceptance.iter().all(|&a| (0.0..=1.0).contains(&a)));
    assert!(summary.iact.iter().all(|&t| t >= 1.0));

    let dir = tempfile::tempdir().unwrap();
    for l in 0..2 {
        let path = dir.path().join(format!("level{l}.csv"));
        records[0].write_level_csv(l, &["seed=9".into()], std::fs::File::create(&path).unwrap()).unwrap();
        let bits = |r: &ChainRow| {
            let f = [r.q, r.y, r.loglik, r.coarse_loglik, r.wall_time_s].map(f64::to_bits);
            (r.iter, r.level, r.accepted, r.burnin_flag, f)
        };
        let rows: Vec<_> = read_level_csv(&path).unwrap().iter().map(bits).collect();
        let original: Vec<_> = records[0].level_rows(l).map(bits).collect();
        assert!(rows == original, "level {l} rows differ after CSV round trip");
    }
}
