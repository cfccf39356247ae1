use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repiln::model::{Model, ModelConfig};
use repiln::repblock::ParamBinder;
use repiln::tensor::{Tape, Tensor};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // burn the same draws as the acceptance test before the model part
    for _ in 0..(4 * 10 + 4 * 2 * 3 + 4 + 8 * 8) {
        let _ = rng.gen::<f64>();
    }
    let cfg = ModelConfig {
        window_len: 32,
        stage_channels: [4, 8, 8, 8],
        blocks_per_stage: [1, 1, 1, 1],
        head_hidden: vec![16],
        ..Default::default()
    };
    let model = Model::<f64>::new(cfg.clone(), 9).unwrap();
    let data: Vec<f64> = (0..6 * 32).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let x = Tensor::from_f64s(vec![6, 32], &data).unwrap();
    let target = Tensor::from_f64s(vec![2], &[0.7, -0.4]).unwrap();

    let loss_of = |m: &Model<f64>, input: &Tensor<f64>| -> f64 {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let xv = tape.constant(input.clone());
        let outs = m.forward_train(&mut tape, &mut binder, &[xv]).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse_loss(outs[0], t).unwrap();
        tape.value(loss).data()[0]
    };

    let analytic = {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let xv = tape.constant(x.clone());
        let outs = m.forward_train(&mut tape, &mut binder, &[xv]).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse_loss(outs[0], t).unwrap();
        tape.backward(loss).unwrap();
        m.store_grads(&tape, &binder).unwrap();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        m.visit_params(&mut |p| grads.push(p.grad().unwrap().to_vec()));
        grads
    };
    let mut names: Vec<String> = Vec::new();
    {
        // derive names from traversal order
        let mut i = 0;
        model.visit_params(&mut |p| {
            names.push(format!("param{} shape {:?}", i, p.shape()));
            i += 1;
        });
    }
    let h = 1e-5;
    let n_params = analytic.len();
    let mut worst = (0.0f64, 0usize, 0usize);
    for pi in 0..n_params {
        for ci in 0..analytic[pi].len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut k = 0;
            plus.visit_params_mut(&mut |p| {
                if k == pi { p.data_mut()[ci] += h; }
                k += 1;
            });
            k = 0;
            minus.visit_params_mut(&mut |p| {
                if k == pi { p.data_mut()[ci] -= h; }
                k += 1;
            });
            let numeric = (loss_of(&plus, &x) - loss_of(&minus, &x)) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            if rel > worst.0 {
                worst = (rel, pi, ci);
            }
        }
    }
    println!("worst rel {} at {} coord {}", worst.0, names[worst.1], worst.2);
    // count how many coords exceed 1e-3
    let mut over = 0;
    for pi in 0..n_params {
        for ci in 0..analytic[pi].len() {
            let _ = (pi, ci);
        }
    }
    let _ = over; over += 0;
}
