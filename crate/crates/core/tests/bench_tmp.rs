use deeptrinet::config::ModelConfig;
use deeptrinet::model::build_model;
use deeptrinet::nn::Mode;
use ndarray::{Array3, Array4};
use std::time::Instant;

#[test]
fn timing_probe() {
    let cfg = ModelConfig::default();
    let mut model = build_model::<f32>(&cfg, 1).unwrap();
    let mut p = Vec::new();
    use deeptrinet::nn::Parameterized;
    model.collect_params("", &mut p);
    let n: usize = p.iter().map(|q| q.value.len()).sum();
    drop(p);
    println!("params: {n}");

    let x = Array4::<f32>::from_elem((6, 256, 256, 3), 0.1);
    let t = Array3::<u16>::zeros((6, 256, 256));

    let t0 = Instant::now();
    let logits = model.forward(&x, Mode::Train).unwrap();
    println!("fwd B=6 256: {:.2?}", t0.elapsed());

    let t1 = Instant::now();
    let lg = deeptrinet::train::loss_ce(&logits, &t, None, None).unwrap();
    println!("loss: {:.2?}", t1.elapsed());

    let t2 = Instant::now();
    model.backward(&lg.grad);
    println!("bwd: {:.2?}", t2.elapsed());

    let t3 = Instant::now();
    let mut adam = deeptrinet::train::Adam::new(1e-3);
    adam.step(&mut model).unwrap();
    println!("adam: {:.2?}", t3.elapsed());

    let t4 = Instant::now();
    let _ = model.forward(&x, Mode::Eval).unwrap();
    println!("eval fwd B=6: {:.2?}", t4.elapsed());
    println!("total epoch-ish: {:.2?}", t0.elapsed());
}
