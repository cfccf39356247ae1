use repiln::model::{Model, ModelConfig};
use repiln::tensor::Tensor;
use rand::{Rng, SeedableRng};

fn main() {
    let cfg = ModelConfig::default();
    let model = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..6*200).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    let x = Tensor::from_f64s(vec![6, 200], &data).unwrap();
    let out = model.predict(&[x]).unwrap();
    println!("output: {:?}", out[0].data());
}
