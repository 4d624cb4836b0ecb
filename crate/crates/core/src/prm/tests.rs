use ndarray::{array, Array2};
use rand::Rng;

use super::*;
use crate::sampler::{Ratio, SamplingMode};
use crate::seed::rng_from;
use crate::synthdata::{generate_proposals, generate_scenes, FeatureModel, RpnQualityModel, SceneConfig};

const C: usize = 3;

fn dims() -> Dims {
    Dims {
        input: FeatureModel::default().dim(C),
        hidden: 6,
        classes: C,
    }
}

fn policy(mode: SamplingMode, pos: usize, neg: usize) -> SamplingPolicy {
    SamplingPolicy::new(mode, Ratio::new(pos, neg).unwrap(), 64).unwrap()
}

fn pool(seed: u64) -> (Array2<f64>, Vec<ProposalLabel<f64>>) {
    let cfg = SceneConfig::default();
    let scenes = generate_scenes(&cfg, 0, 3, seed).unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let props = generate_proposals(
            s,
            &cfg,
            0.5,
            &RpnQualityModel::default(),
            &FeatureModel::default(),
            seed + 100 + i as u64,
        );
        for p in props {
            feats.extend(p.feature);
            labels.push(p.label);
        }
    }
    let n = labels.len();
    (Array2::from_shape_vec((n, dims().input), feats).unwrap(), labels)
}

fn train() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        total_steps: 20,
        hidden: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_weight_second_head_leaves_first_head_training_unchanged() {
    let (x, labels) = pool(1);
    let p = ProposalPool {
        features: x.view(),
        labels: &labels,
    };
    let pa = policy(SamplingMode::Soft, 1, 3);
    let pb = policy(SamplingMode::Hard, 1, 1);
    let mut single = PrmModel::<f64>::init(dims(), &[pa], &mut rng_from(2), 0.3).unwrap();
    let mut pair = single.clone();
    let mut rng = rng_from(99);
    pair.heads.push(PrmHead {
        params: Head::init(dims(), &mut rng, 0.3),
        policy: pb,
        loss_scale: 0.0,
    });
    let cfg = train();
    let sched = AnnealSchedule::new(7.0, cfg.total_steps).unwrap();
    for t in 0..cfg.total_steps {
        prm_train_step(&mut single, p, t, &cfg, &sched, &[head_seed(5, 0, t)]).unwrap();
        prm_train_step(&mut pair, p, t, &cfg, &sched, &[head_seed(5, 0, t), head_seed(5, 1, t)])
            .unwrap();
    }
    assert_eq!(pair.backbone, single.backbone);
    assert_eq!(pair.heads[0], single.heads[0]);
}

#[test]
fn gradient_norms_obey_triangle_inequality() {
    let (x, labels) = pool(3);
    let p = ProposalPool {
        features: x.view(),
        labels: &labels,
    };
    let pols = [policy(SamplingMode::Soft, 1, 1), policy(SamplingMode::Soft, 1, 9)];
    let mut m = PrmModel::<f64>::init(dims(), &pols, &mut rng_from(4), 0.3).unwrap();
    let cfg = train();
    let sched = AnnealSchedule::off(cfg.total_steps);
    for t in 0..cfg.total_steps {
        let r = prm_train_step(&mut m, p, t, &cfg, &sched, &[head_seed(1, 0, t), head_seed(1, 1, t)])
            .unwrap();
        let g = &r.grad_norms;
        assert!(g.satisfies_triangle(1e-12));
        assert!(g.head_norms.iter().all(|&n| n > 0.0));
        let c = g.cosine.unwrap();
        assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        assert_eq!(g.step, t);
    }
}

#[test]
fn identical_heads_double_the_backbone_gradient() {
    let (x, labels) = pool(5);
    let p = ProposalPool {
        features: x.view(),
        labels: &labels,
    };
    let pol = policy(SamplingMode::Soft, 1, 3);
    let mut m = PrmModel::<f64>::init(dims(), &[pol], &mut rng_from(6), 0.3).unwrap();
    m.heads.push(m.heads[0].clone());
    let cfg = train();
    let seed = head_seed(8, 0, 0);
    let r = prm_train_step(&mut m, p, 0, &cfg, &AnnealSchedule::off(20), &[seed, seed]).unwrap();
    let g = r.grad_norms;
    assert_eq!(g.head_norms[0], g.head_norms[1]);
    assert!((g.sum_norm - 2.0 * g.head_norms[0]).abs() <= 1e-12 * g.sum_norm);
    assert!((g.cosine.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r.heads[0], r.heads[1]);
    assert_eq!(m.heads[0], m.heads[1]);
}

#[test]
fn seed_count_must_match_heads() {
    let (x, labels) = pool(7);
    let p = ProposalPool {
        features: x.view(),
        labels: &labels,
    };
    let mut m =
        PrmModel::<f64>::init(dims(), &[policy(SamplingMode::Soft, 1, 3)], &mut rng_from(0), 0.1).unwrap();
    assert!(prm_train_step(&mut m, p, 0, &train(), &AnnealSchedule::off(20), &[1, 2]).is_err());
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (x, labels) = pool(11);
        let p = ProposalPool {
            features: x.view(),
            labels: &labels,
        };
        let pols = [policy(SamplingMode::Soft, 1, 1), policy(SamplingMode::Hard, 1, 9)];
        let mut m = PrmModel::<f64>::init(dims(), &pols, &mut rng_from(12), 0.3).unwrap();
        let cfg = train();
        let sched = AnnealSchedule::new(5.0, cfg.total_steps).unwrap();
        let mut recs = Vec::new();
        for t in 0..cfg.total_steps {
            let seeds = [head_seed(2, 0, t), head_seed(2, 1, t)];
            recs.push(prm_train_step(&mut m, p, t, &cfg, &sched, &seeds).unwrap());
        }
        (m, recs)
    };
    assert_eq!(run(), run());
}

#[test]
fn ensemble_examples() {
    let a = array![[1.0, 2.0, 3.0]];
    let b = array![[3.0, 2.0, 1.0]];
    assert_eq!(ensemble_scores(&[a.clone(), b]).unwrap(), array![[2.0, 2.0, 2.0]]);
    assert_eq!(ensemble_scores(std::slice::from_ref(&a)).unwrap(), a);
    assert!(ensemble_scores::<f64>(&[]).is_err());
    assert!(ensemble_scores(&[a, array![[1.0, 2.0]]]).is_err());
}

#[test]
fn ensemble_matches_brute_force_and_is_order_free() {
    let mut rng = rng_from(21);
    let heads: Vec<Array2<f64>> = (0..3)
        .map(|_| Array2::from_shape_simple_fn((7, 4), || rng.gen_range(-5.0..5.0)))
        .collect();
    let mean = ensemble_scores(&heads).unwrap();
    for i in 0..7 {
        for j in 0..4 {
            let want = (heads[0][[i, j]] + heads[1][[i, j]] + heads[2][[i, j]]) / 3.0;
            assert!((mean[[i, j]] - want).abs() < 1e-12);
        }
    }
    let perm = [heads[2].clone(), heads[0].clone(), heads[1].clone()];
    let other = ensemble_scores(&perm).unwrap();
    assert!(mean.iter().zip(other.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn logit_averaging_differs_from_probability_averaging() {
    let a = array![[10.0, 0.0]];
    let b = array![[0.0, 1.0]];
    let from_logits = softmax_rows(ensemble_scores(&[a.clone(), b.clone()]).unwrap().view());
    let pa = softmax_rows(a.view());
    let pb = softmax_rows(b.view());
    let from_probs = (&pa + &pb) / 2.0;
    // mean logits (5, 0.5): p0 = 1/(1+e^-4.5)
    let expect = 1.0 / (1.0 + (-4.5f64).exp());
    assert!((from_logits[[0, 0]] - expect).abs() < 1e-12);
    assert!((from_logits[[0, 0]] - from_probs[[0, 0]]).abs() > 1e-3);
}

#[test]
fn regression_head_selection() {
    let h11 = policy(SamplingMode::Soft, 1, 1);
    let h19 = policy(SamplingMode::Soft, 1, 9);
    let h13 = policy(SamplingMode::Soft, 1, 3);
    let h26 = policy(SamplingMode::Hard, 2, 6);
    assert_eq!(regression_head_index(&[h11, h19]), 0);
    assert_eq!(regression_head_index(&[h19, h11]), 1);
    assert_eq!(regression_head_index(&[h19]), 0);
    // 1:3 and 2:6 share a positive fraction, so the earlier head wins
    assert_eq!(regression_head_index(&[h19, h13, h26]), 1);
    assert_eq!(regression_head_index(&[h19, h26, h13]), 1);

    let m = PrmModel::<f64>::init(dims(), &[h19, h11], &mut rng_from(0), 0.1).unwrap();
    let outs = vec![array![[1.0, 2.0, 3.0, 4.0]], array![[5.0, 6.0, 7.0, 8.0]]];
    assert!(std::ptr::eq(select_regression(&m, &outs), &outs[1]));
}

#[test]
fn identical_heads_predict_like_one_head() {
    let pol = policy(SamplingMode::Soft, 1, 3);
    let one = PrmModel::<f64>::init(dims(), &[pol], &mut rng_from(30), 0.5).unwrap();
    let mut many = one.clone();
    many.heads.push(one.heads[0].clone());
    many.heads.push(one.heads[0].clone());
    let (x, labels) = pool(31);
    let boxes: Vec<BBox<f64>> = (0..labels.len())
        .map(|i| BBox::from_corners([i as f64 % 50.0, 1.0, i as f64 % 50.0 + 10.0, 12.0]))
        .collect();
    let a = prm_predict(&one, x.view(), &boxes).unwrap();
    let b = prm_predict(&many, x.view(), &boxes).unwrap();
    assert!(a.scores.iter().zip(b.scores.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    assert_eq!(a.boxes, b.boxes);
}

#[test]
fn zero_model_predicts_uniform_scores_and_unchanged_boxes() {
    let d = dims();
    let m = PrmModel::<f64> {
        backbone: Backbone::zeros(d),
        heads: vec![
            PrmHead {
                params: Head::zeros(d),
                policy: policy(SamplingMode::Soft, 1, 1),
                loss_scale: 1.0,
            },
            PrmHead {
                params: Head::zeros(d),
                policy: policy(SamplingMode::Soft, 1, 9),
                loss_scale: 1.0,
            },
        ],
    };
    let x = Array2::from_elem((2, d.input), 0.7);
    let boxes = vec![
        BBox::from_corners([0.0, 0.0, 10.0, 10.0]),
        BBox::from_corners([5.0, 6.0, 20.0, 30.0]),
    ];
    let pred = prm_predict(&m, x.view(), &boxes).unwrap();
    assert!(pred.scores.iter().all(|&s| (s - 0.25).abs() < 1e-15));
    assert_eq!(pred.boxes, boxes);
    assert!(prm_predict(&m, x.view(), &boxes[..1]).is_err());
}

#[test]
fn prediction_composes_head_outputs() {
    let pols = [policy(SamplingMode::Soft, 1, 9), policy(SamplingMode::Hard, 1, 1)];
    let m = PrmModel::<f64>::init(dims(), &pols, &mut rng_from(40), 0.8).unwrap();
    let (x, labels) = pool(41);
    let boxes: Vec<BBox<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, _)| BBox::from_corners([1.0, i as f64 % 30.0, 15.0, i as f64 % 30.0 + 9.0]))
        .collect();
    let pred = prm_predict(&m, x.view(), &boxes).unwrap();
    let hidden = backbone_forward(&m.backbone, x.view()).unwrap();
    let (l0, _, _) = head_forward(&m.heads[0].params, hidden.view()).unwrap();
    let (l1, d1, _) = head_forward(&m.heads[1].params, hidden.view()).unwrap();
    let want = softmax_rows(((&l0 + &l1) / 2.0).view());
    assert!(pred.scores.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    for (i, (got, p)) in pred.boxes.iter().zip(&boxes).enumerate() {
        let r = d1.row(i);
        assert_eq!(*got, decode_box(p, &[r[0], r[1], r[2], r[3]]));
    }
    let (s0, b0) = pred.single_head(0, &boxes);
    assert_eq!(s0, softmax_rows(l0.view()));
    assert_eq!(b0.len(), boxes.len());
    assert_eq!(pred.head_foreground(1).len(), boxes.len());
}

#[test]
fn gradnorm_csv_layout() {
    assert_eq!(gradnorm_csv_header(2), "step,norm_h1,norm_h2,norm_sum,cosine");
    let recs = [
        GradNormRecord {
            step: 0,
            head_norms: vec![3.0, 4.0],
            sum_norm: 5.0,
            cosine: Some(0.0),
        },
        GradNormRecord {
            step: 1,
            head_norms: vec![1.0],
            sum_norm: 1.0,
            cosine: None,
        },
    ];
    let mut buf = Vec::new();
    write_gradnorm_csv(&mut buf, 2, &recs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "0,3e0,4e0,5e0,0.000000000000");
    assert_eq!(lines[2], "1,1e0,1e0,");
}

#[test]
fn single_precision_step() {
    let d = dims();
    let (x, labels) = pool(50);
    let x32 = x.mapv(|v| v as f32);
    let l32: Vec<ProposalLabel<f32>> = labels
        .iter()
        .map(|l| ProposalLabel {
            class_id: l.class_id,
            max_iou: l.max_iou as f32,
            matched_gt: l.matched_gt,
            nearest_class: l.nearest_class,
            regression_target: l.regression_target.map(|r| r.map(|v| v as f32)),
        })
        .collect();
    let mut m = PrmModel::<f32>::init(d, &[policy(SamplingMode::Soft, 1, 3)], &mut rng_from(1), 0.3).unwrap();
    let p = ProposalPool {
        features: x32.view(),
        labels: &l32,
    };
    let r = prm_train_step(&mut m, p, 0, &train(), &AnnealSchedule::off(20), &[3]).unwrap();
    assert!(r.heads[0].loss.is_finite());
    assert!(m.backbone.is_finite());
}
