use latent_twins::datasets::{self, sample_pairs_ode};
use latent_twins::odelab::{self, OdeSystem};
use latent_twins::twin::*;
use latent_twins::autodiff::*;

fn main() {
    for sys in [OdeSystem::Harmonic, OdeSystem::Sir] {
        let (lo, hi) = sys.interval();
        let reference = odelab::integrate(sys, &sys.default_initial(), lo, hi, 1e-12, 1e-10).unwrap();
        for seed in [0u64, 1, 2, 42] {
            let ds = datasets::normalize(sample_pairs_ode(sys, 1 << 15, None, seed).unwrap()).unwrap();
            let cfg = TrainConfig {
                epochs: 1000, batch_size: 256, lr: 1e-2,
                schedule: LrSchedule::step_halving(1e-2, 250),
                w_rec: 1.0, w_pred: 1.0, seed, deterministic: true,
            };
            let (model, _) = train_twin(&ds, &TwinArch::ode_default(), &cfg).unwrap();
            let d = trajectory_mse_direct(&model, &reference, lo, 200).unwrap();
            let r = trajectory_mse_recursive(&model, &reference, 200).unwrap();
            println!("{} seed {seed}: direct {:.4e} recursive {:.4e} rec>=dir {}", sys.name(), d, r, r >= d);
        }
    }
}
