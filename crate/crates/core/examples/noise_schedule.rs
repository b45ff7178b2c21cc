//! Cosine schedule, forward corruption of a box and one DDIM jump back.
//!
//! ```text
//! cargo run --release --example noise_schedule
//! ```

use cdiffdet::diffusion::{
    ddim_timesteps, denormalize, epsilon_from_x0, normalize, Diffusion, NoiseSchedule,
    COSINE_OFFSET,
};
use cdiffdet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cdiffdet::Result<()> {
    let schedule = NoiseSchedule::cosine(1000, COSINE_OFFSET)?;
    for t in [0, 1, 250, 500, 750, 999, 1000] {
        println!("t = {t:4}  alpha_bar = {:.6}", schedule.alpha_bar(t)?);
    }

    let d = Diffusion::new(schedule, 2.0);
    // A centered box covering a quarter of the image, center form in [0, 1].
    let x0 = normalize(&Tensor::new(&[1, 1, 4], vec![0.5, 0.5, 0.5, 0.5])?, d.scale);
    let noise = Tensor::randn(&[1, 1, 4], &mut ChaCha8Rng::seed_from_u64(0));
    for t in [100, 500, 900] {
        let xt = d.q_sample(&x0, t, &noise)?;
        println!("t = {t}: x_t = {:?}", denormalize(&xt, d.scale).data());
    }

    // With the exact clean box, a DDIM step lands on the forward marginal.
    let xt = d.q_sample(&x0, 900, &noise)?;
    let eps = epsilon_from_x0(&xt, &x0, d.schedule.alpha_bar(900)?)?;
    let back = d.ddim_step(&xt, &x0, &eps, 900, 0)?;
    println!(
        "900 -> 0 with the true x0: {:?}",
        denormalize(&back, d.scale).data()
    );
    println!("4-step sampling grid: {:?}", ddim_timesteps(1000, 4)?);
    Ok(())
}
