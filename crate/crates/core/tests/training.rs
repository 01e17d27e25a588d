mod common;

use std::sync::Arc;
use std::time::Instant;

use common::toy_config;
use subnet_cil::inference::{predict, subnetwork_logits, InferenceMode};
use subnet_cil::train::{ablation_configs, ABLATION_METHODS};
use subnet_cil::{
    ensemble_predict, run_ablation, run_experiment, train_task, Error, LogitStackEnsemble, PreparedStream, RunConfig,
    StreamSpec, TrainState, Trainer,
};

fn trained(cfg: &RunConfig) -> Trainer {
    let data = PreparedStream::build(cfg).unwrap();
    let mut t = Trainer::new(cfg.clone(), data).unwrap();
    t.run_all().unwrap();
    t
}

#[test]
fn zero_loss_weights_reduce_to_the_supervised_run() {
    let weighted_off = RunConfig {
        alpha: 0.0,
        beta: 0.0,
        ..toy_config(2)
    };
    let flags_off = RunConfig {
        use_contrastive: false,
        use_pseudo: false,
        ..toy_config(2)
    };
    let a = trained(&weighted_off);
    let b = trained(&flags_off);
    assert_eq!(a.state, b.state);
    assert_eq!(a.report.accuracy, b.report.accuracy);
    for log in &a.report.epochs {
        assert_eq!(log.l_contrastive, 0.0);
        assert_eq!(log.l_pseudo, 0.0);
        assert_eq!(log.pseudo_seen, 0);
        assert_eq!(log.l_total, log.l_labeled);
    }
}

#[test]
fn separable_two_class_task_is_learned() {
    let cfg = RunConfig {
        stream: StreamSpec {
            num_tasks: 1,
            class_universe: 2,
            ood_classes: 0,
            ood_fraction: 0.0,
            classes_per_task: 2,
            labeled_per_class: 60,
            unlabeled_per_class: 60,
            image_side: 8,
            seed: 21,
            ..StreamSpec::default()
        },
        hidden: vec![32],
        ..RunConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    let acc = report.average_accuracy.unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn identical_runs_give_identical_reports() {
    let cfg = toy_config(2);
    let a = run_experiment(&cfg).unwrap().to_json();
    let b = run_experiment(&cfg).unwrap().to_json();
    assert_eq!(a, b);
    let other = run_experiment(&RunConfig {
        stream: StreamSpec {
            seed: 4,
            ..cfg.stream.clone()
        },
        ..cfg
    })
    .unwrap()
    .to_json();
    assert_ne!(a, other);
}

#[test]
fn tasks_must_be_trained_in_order() {
    let cfg = toy_config(2);
    let data = PreparedStream::build(&cfg).unwrap();
    let arch = cfg.architecture().unwrap();
    let mut state = TrainState::init(&cfg, &arch).unwrap();
    let err = train_task(&mut state, &data.stream.experiences[1], &cfg, &arch).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn two_task_desk_run_fits_the_budget() {
    let cfg = RunConfig {
        stream: StreamSpec {
            num_tasks: 2,
            ..StreamSpec::default()
        },
        ..RunConfig::default()
    };
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(report.complete);
    assert!(secs < 60.0, "took {secs:.1}s");
}

#[test]
fn last_subnetwork_mode_ignores_earlier_subnetworks() {
    let cfg = RunConfig {
        stream: StreamSpec {
            repetition_rate: 1.0,
            class_universe: 4,
            ..toy_config(3).stream
        },
        ..toy_config(3)
    };
    let t = trained(&cfg);
    let ens = LogitStackEnsemble::from_archive(&t.state.sps);
    let images = &t.data.splits[2].images;
    let last = predict(InferenceMode::LastSubnetwork, &ens, &t.state.sps, &t.arch, images).unwrap();
    let logits = subnetwork_logits(&ens, &t.state.sps, &t.arch, images).unwrap();
    let classes = ens.scored_classes();
    for (r, &p) in last.iter().enumerate() {
        let own = logits[2].row(r);
        let best = classes.iter().copied().max_by(|&a, &b| own[a as usize].total_cmp(&own[b as usize]).then(b.cmp(&a)));
        assert_eq!(Some(p), best);
    }
    let ensembled = predict(InferenceMode::Ensemble, &ens, &t.state.sps, &t.arch, images).unwrap();
    assert_ne!(last, ensembled, "every class recurs, so averaging should change some predictions");
}

#[test]
fn classes_seen_by_one_task_use_that_task_alone() {
    let cfg = RunConfig {
        stream: StreamSpec {
            repetition_rate: 0.0,
            ..toy_config(3).stream
        },
        ..toy_config(3)
    };
    let t = trained(&cfg);
    let ens = LogitStackEnsemble::from_archive(&t.state.sps);
    let images = &t.data.splits[2].images;
    let pred = ensemble_predict(&ens, &t.state.sps, &t.arch, images).unwrap();
    let logits = subnetwork_logits(&ens, &t.state.sps, &t.arch, images).unwrap();
    let own = &t.data.stream.experiences[2].class_set;
    for (j, c) in pred.classes.iter().enumerate() {
        if !own.contains(c) {
            continue;
        }
        assert_eq!(ens.contributors(*c), &[2]);
        for r in 0..images.rows() {
            assert_eq!(pred.scores.get(r, j), logits[2].get(r, *c as usize));
        }
    }
}

#[test]
fn ablation_rows_share_one_stream() {
    let cfg = toy_config(2);
    let ab = run_ablation(&cfg).unwrap();
    let names: Vec<&str> = ab.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ABLATION_METHODS);
    assert!(ab.reports.iter().all(|r| r.stream_digest == ab.stream_digest));
    for i in 1..4 {
        let d = ab.rows[i].average_accuracy - ab.rows[i - 1].average_accuracy;
        assert_eq!(ab.rows[i].delta, d);
    }
    assert_eq!(ab.rows[0].delta, 0.0);
    // Each row equals a standalone run of its configuration.
    let data = Arc::new(PreparedStream::build(&cfg).unwrap().as_ref().clone());
    let third = &ablation_configs(&cfg)[2];
    let mut solo = Trainer::new(third.clone(), data).unwrap();
    solo.run_all().unwrap();
    assert_eq!(solo.report.to_json(), ab.reports[2].to_json());
    assert!(ab.table().lines().count() == 6);
}
