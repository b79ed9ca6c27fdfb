use crlab_core::data::{generate_dataset, sample_batch, DatasetSpec};
use crlab_core::losses::{contrastive_loss, make_pseudo_labels, total_loss};
use crlab_core::model::{forward, init_params, predict_logits, EmaShadow};
use crlab_core::numerics::RngState;
use crlab_core::trainer::{sgd_nesterov_step, OptimizerState, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::default();
    let spec = DatasetSpec::synthetic_default(4, 8, 4, 2000, 1000, 1);
    let ds = generate_dataset(&spec).unwrap();
    let mut rng = RngState::new(2);
    let mut params = init_params(&cfg.model, &mut RngState::new(1)).unwrap();
    let mut opt = OptimizerState::new(&params);
    let mut ema = EmaShadow::new(&params, 0.999);
    let n = 300;
    let (mut t_sample, mut t_pseudo, mut t_fwd, mut t_loss, mut t_opt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let t0 = Instant::now();
        let (sample, views) = sample_batch(&ds.labeled, &ds.unlabeled, 16, 7, 2, &cfg.augment, &mut rng).unwrap();
        t_sample += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let weak_logits = predict_logits(&params, &views.weak).unwrap();
        let records = make_pseudo_labels(&weak_logits, 0.95, 0.95).unwrap();
        t_pseudo += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let lc = forward(&params, &sample.x).unwrap();
        let sc = forward(&params, &views.strong).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let (_, grads) = total_loss(&params, &lc, &sample.y, &sc, &views.source_of_view, &records, &cfg.loss_config()).unwrap();
        t_loss += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        sgd_nesterov_step(&mut params, &grads, &mut opt, 0.03, 0.9, 0.005).unwrap();
        ema.update(&params).unwrap();
        t_opt += t0.elapsed().as_secs_f64();
    }
    let ms = |t: f64| t / n as f64 * 1000.0;
    println!("sample {:.3} pseudo {:.3} fwd {:.3} loss+bwd {:.3} opt+ema {:.3} total {:.3} ms/step",
        ms(t_sample), ms(t_pseudo), ms(t_fwd), ms(t_loss), ms(t_opt),
        ms(t_sample + t_pseudo + t_fwd + t_loss + t_opt));
    // and the contrastive term alone
    let (sample, views) = sample_batch(&ds.labeled, &ds.unlabeled, 16, 7, 2, &cfg.augment, &mut rng).unwrap();
    let weak_logits = predict_logits(&params, &views.weak).unwrap();
    let records = make_pseudo_labels(&weak_logits, 0.95, 0.95).unwrap();
    let sc = forward(&params, &views.strong).unwrap();
    let _ = sample;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = contrastive_loss(&sc.z, &records, &views.source_of_view, 0.01).unwrap();
    }
    println!("contrastive alone {:.3} ms", ms(t0.elapsed().as_secs_f64()));
}
