use std::time::Instant;

use alchemy_model::{ModelConfig, Transformer};

fn main() {
    let m = Transformer::new(ModelConfig::default(), 0).unwrap();
    let toks: Vec<u8> = (0..183).map(|i| (i % 22) as u8).collect();
    let n = 20;
    let t = Instant::now();
    for _ in 0..n {
        m.final_logits(&toks).unwrap();
    }
    println!("forward  {:.1} ms/seq", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    let mut g = vec![0.0f32; m.num_params()];
    let t = Instant::now();
    for i in 0..n {
        m.loss_and_grad(&toks, 3, Some(i), 1.0, &mut g).unwrap();
    }
    println!("fwd+bwd  {:.1} ms/seq", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}
