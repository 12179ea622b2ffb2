use pgt::config::load_config;
use pgt::data::{Dataset, Split};
use pgt::grouping::BarrierTap;
use pgt::model;
use pgt::params::Binding;
use pgt::rng::StreamKey;
use pgt::ssl::probe::linear_probe;
use pgt::ssl::trainer;
use pgt::tensor::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let fc = load_config(std::path::Path::new("configs/micro.cfg")).unwrap();
    let dataset = Dataset::synthetic(0xDA7A, 32);
    let student = if args.len() > 1 {
        trainer::load_student::<f32>(std::path::Path::new(&args[1])).unwrap()
    } else {
        trainer::init_state::<f32>(&fc, 7).unwrap().student
    };
    let n_imgs = 96;
    let mut sum_feats: Vec<Vec<Vec<f64>>> = Vec::new(); // [img][draw][dim]
    let mut pooled: Vec<Vec<f64>> = Vec::new(); // mean refined tokens
    let mut labels = Vec::new();
    for i in 0..n_imgs {
        let (img, y) = dataset.probe_item(Split::ProbeTrain, i);
        labels.push(y);
        let mut draws = Vec::new();
        for d in 0..2u64 {
            let tape = Tape::<f32>::no_grad();
            let out = model::forward(
                &tape, &Binding::Frozen(&student), &fc.model, &img,
                StreamKey::root(1000 + d).child(i as u64), None, &BarrierTap::None,
            ).unwrap();
            if d == 0 {
                let v = tape.values_f64(&out.refined_tokens);
                let dmodel = fc.model.input_dim;
                let n = v.len() / dmodel;
                let mut mean = vec![0.0; dmodel];
                for t in 0..n { for k in 0..dmodel { mean[k] += v[t * dmodel + k] / n as f64; } }
                pooled.push(mean);
            }
            draws.push(tape.values_f64(&out.summary));
        }
        sum_feats.push(draws);
    }
    // variance decomposition on summary
    let dim = sum_feats[0][0].len();
    let mut within = 0.0;
    for f in &sum_feats {
        within += f[0].iter().zip(f[1].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
    }
    within /= n_imgs as f64;
    let mut grand = vec![0.0; dim];
    for f in &sum_feats { for k in 0..dim { grand[k] += (f[0][k] + f[1][k]) / 2.0 / n_imgs as f64; } }
    let mut across = 0.0;
    for f in &sum_feats {
        let m: Vec<f64> = (0..dim).map(|k| (f[0][k] + f[1][k]) / 2.0).collect();
        across += m.iter().zip(grand.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    across /= n_imgs as f64;
    println!("summary: seed-noise var {within:.5}, image var {across:.5}, ratio {:.3}", across / within.max(1e-12));
    // probe ceilings (train == test here, just a separability signal)
    let x: Vec<Vec<f64>> = sum_feats.iter().map(|f| f[0].clone()).collect();
    let acc_sum = linear_probe(&x[..64].to_vec(), &labels[..64].to_vec(), &x[64..].to_vec(), &labels[64..].to_vec(), 4).unwrap();
    let acc_pool = linear_probe(&pooled[..64].to_vec(), &labels[..64].to_vec(), &pooled[64..].to_vec(), &labels[64..].to_vec(), 4).unwrap();
    println!("probe(summary 1-draw) {acc_sum:.3}  probe(mean refined tokens) {acc_pool:.3}");
}
