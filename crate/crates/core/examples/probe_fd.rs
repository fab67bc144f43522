// scratch: diagnose composed-model FD mismatches
use dgiqa::model::{DgiqaModel, ModelConfig};
use dgiqa::tensor::{BnMode, Tensor};
use dgiqa::training::{consistency_loss, mse_loss, total_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn main() {
    let config = ModelConfig::toy();
    let seed = 11u64.wrapping_mul(7_919); // instance k=0
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let model = DgiqaModel::<f64>::init(config.clone(), rng.gen()).unwrap();
    let side = config.input_size;
    let rgb = Tensor::from_vec(vec![1,3,side,side], (0..3*side*side).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let depth = Tensor::from_vec(vec![1,1,side,side], (0..side*side).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let target = Tensor::from_vec(vec![1], vec![rng.gen_range(0.1..0.9)]).unwrap();
    let loss_of = |m: &DgiqaModel<f64>| -> f64 {
        let trace = m.forward(&rgb, &depth, BnMode::Train).unwrap();
        let mse = mse_loss(&trace.q_hat, &target).unwrap();
        let flip = m.forward(&rgb.flip_horizontal(), &depth.flip_horizontal(), BnMode::Train).unwrap();
        let cl = consistency_loss(&trace.q_hat, &flip.q_hat).unwrap();
        total_loss(&mse, &cl, 0.3).unwrap().item()
    };
    let learnable = model.learnable();
    for (_, t) in &learnable { t.zero_grad(); }
    {
        let trace = model.forward(&rgb, &depth, BnMode::Train).unwrap();
        let mse = mse_loss(&trace.q_hat, &target).unwrap();
        let flip = model.forward(&rgb.flip_horizontal(), &depth.flip_horizontal(), BnMode::Train).unwrap();
        let cl = consistency_loss(&trace.q_hat, &flip.q_hat).unwrap();
        total_loss(&mse, &cl, 0.3).unwrap().backward().unwrap();
    }
    let mut worst = 0.0f64;
    for (name, t) in &learnable {
        let analytic = t.grad().unwrap();
        let original = t.to_vec();
        for probe in 0..2usize.min(original.len()) {
            let i = (probe * 7919 + 13) % original.len();
            let fd_at = |h: f64| -> f64 {
                let mut b = original.clone(); b[i] += h; t.set_values(b);
                let p = loss_of(&model);
                let mut b = original.clone(); b[i] -= h; t.set_values(b);
                let m = loss_of(&model);
                t.set_values(original.clone());
                (p - m) / (2.0 * h)
            };
            let fd1 = fd_at(1e-4);
            let rel = (analytic[i] - fd1).abs() / analytic[i].abs().max(fd1.abs()).max(1e-6);
            if rel > 1e-4 {
                let fd2 = fd_at(5e-5);
                let fd3 = fd_at(1e-5);
                let consistency = (fd1 - fd2).abs() / fd1.abs().max(fd2.abs()).max(1e-6);
                println!("{name}[{i}]: analytic {:.6e} fd(1e-4) {:.6e} fd(5e-5) {:.6e} fd(1e-5) {:.6e} rel {rel:.3e} fd-consistency {consistency:.3e}", analytic[i], fd1, fd2, fd3);
            }
            worst = worst.max(rel);
        }
    }
    println!("worst {worst:.3e}");
}
