use mcnmt::clustering::{dbscan, pairwise_fscore, partition_embeddings, partition_granularity, BaseEps, EpsSchedule};
use mcnmt::coteach::run_mcn;
use mcnmt::coteach::Network;
use mcnmt::evalmetrics::evaluate;
use mcnmt::evalmetrics::RetrievalSplit;
use mcnmt::pipeline::{adapt_finetune, median, run_experiment, train_source, Evaluator, RunConfig, Variant};
use mcnmt::synthdata::{generate, make_benchmark, Domain, DomainSpec, SplitSpec, UnlabeledView};

fn two_identities(seed: u64) -> DomainSpec {
    DomainSpec {
        domain: Domain::Source,
        identity_count: 2,
        identity_offset: 0,
        samples_per_identity: 12,
        input_dim: 4,
        intra_easy_sigma: 0.01,
        intra_hard_sigma: 0.0,
        hard_fraction: 0.0,
        min_center_separation: 1.0,
        domain_transform: None,
        noise_sigma: 0.0,
        split: SplitSpec {
            train_identities: 2,
            val_identities: 0,
            queries_per_identity: 0,
        },
        seed,
    }
}

#[test]
fn two_separated_identities_cluster_with_unit_fscore() {
    let ds = generate(&two_identities(5)).unwrap();
    let inputs = ds.inputs(&ds.splits.train);
    let r = dbscan(&inputs, 0.2, 3).unwrap();
    assert_eq!(r.cluster_count, 2);
    assert!(r.outliers().is_empty());
    let pseudo: Vec<Option<u32>> = r.assignments.iter().map(|a| a.map(|c| c as u32)).collect();
    assert_eq!(pairwise_fscore(&pseudo, &ds.identities(&ds.splits.train)).unwrap(), 1.0);
}

fn mean_distance_ratio(embeddings: &[Vec<f64>], ids: &[u32]) -> f64 {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let d = mcnmt::losses::euclidean(&embeddings[i], &embeddings[j]);
            if ids[i] == ids[j] {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    (within / nw as f64) / (between / nb as f64)
}

#[test]
fn source_training_pulls_identities_apart() {
    let ds = generate(&two_identities(9)).unwrap();
    let config = RunConfig {
        p: 2,
        k: 4,
        ..RunConfig::default()
    };
    let model = train_source(&ds, &config).unwrap();
    let idx = &ds.splits.train;
    let emb: Vec<Vec<f64>> = model
        .forward_batch(&ds.inputs(idx))
        .unwrap()
        .into_iter()
        .map(|e| e.into_vec())
        .collect();
    let ratio = mean_distance_ratio(&emb, &ds.identities(idx));
    assert!(ratio < 1.0, "intra/inter ratio {ratio}");
}

#[test]
fn adapting_with_zero_steps_keeps_the_source_model() {
    let config = RunConfig {
        finetune_steps: 0,
        ..RunConfig::default()
    };
    let (source, target) = make_benchmark("default-shift", 1).unwrap();
    let m_src = train_source(&source, &config).unwrap();
    let view = target.train_view();
    let p = partition_granularity(&m_src, view.inputs(), 3, &config.eps_schedule()).unwrap();
    assert_eq!(adapt_finetune(&m_src, &p, &view, &config).unwrap(), m_src);
}

#[test]
fn n2_fine_tunes_on_the_first_tier_only() {
    // A dense blob plus three far points: the blob is the single labeled tier.
    let mut points: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 1e-3, 0.0]).collect();
    points.extend([vec![5.0, 5.0], vec![-5.0, 5.0], vec![5.0, -5.0]]);
    let schedule = EpsSchedule {
        base: BaseEps::Fixed(0.1),
        ..EpsSchedule::default()
    };
    let p = partition_embeddings(&points, 2, &schedule).unwrap();
    assert_eq!(p.tier(1), (0..20).collect::<Vec<_>>());
    assert_eq!(p.tier(2), [20, 21, 22]);
    assert_eq!(p.labeled_union(), p.tier(1));
}

#[test]
fn n2_runs_exactly_one_paradigm() {
    let config = RunConfig {
        n: 2,
        r: 4,
        ..RunConfig::default()
    };
    let (source, target) = make_benchmark("default-shift", 2).unwrap();
    let m_src = train_source(&source, &config).unwrap();
    let view: UnlabeledView = target.train_view();
    let p = partition_granularity(&m_src, view.inputs(), 2, &config.eps_schedule()).unwrap();
    let eval = Evaluator::new(&target);
    let mut models: Vec<Network> = (0..2)
        .map(|_| Network::new(m_src.clone(), config.alpha).unwrap())
        .collect();
    let mut log = Vec::new();
    let out = run_mcn(
        &mut models,
        &p,
        &view,
        &config.coteach_config(true),
        &|m| eval.validation_map(m),
        None,
        &mut log,
    )
    .unwrap();
    assert_eq!(out.paradigms.len(), 1);
    assert_eq!(out.paradigms[0].student, 2);
    assert!(log.iter().all(|l| l.paradigm == 2));
}

#[test]
fn without_shift_fine_tuning_does_not_beat_direct_transfer() {
    let mut gains = Vec::new();
    for seed in 0..5 {
        let config = RunConfig {
            preset: "no-shift".into(),
            seed,
            ..RunConfig::default()
        };
        let r = run_experiment(&config, false).unwrap();
        let dt = r.variant_map(Variant::DirectTransfer).unwrap();
        let ft = r.variant_map(Variant::FineTune).unwrap();
        gains.push(ft - dt);
    }
    let g = median(&mut gains);
    assert!(g.abs() < 0.02, "median fine-tune gain without shift: {g}");
}

#[test]
fn shift_hurts_the_source_model() {
    let config = RunConfig::default();
    let (source, target) = make_benchmark("default-shift", 0).unwrap();
    let m_src = train_source(&source, &config).unwrap();
    let (_, clean) = make_benchmark("no-shift", 0).unwrap();
    let test = |ds: &mcnmt::synthdata::SyntheticDataset| {
        evaluate(&RetrievalSplit::embed(&m_src, ds, &ds.splits.query, &ds.splits.gallery).unwrap())
            .unwrap()
            .map
    };
    assert!(test(&target) < test(&clean));
}
