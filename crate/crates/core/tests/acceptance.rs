//! Acceptance suite. Each test prints one `P<n> PASS|FAIL` line and then asserts.
//!
//! Tests share one lock so the timed criteria are not measured under contention
//! on small machines.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use crg_core::crg::{image_cycle_loss, latent_cycle_loss, train_encoder, CrgMode, CrgTrainConfig};
use crg_core::editing::{
    attribute_direction, edit_latent, fit_two_gaussians, k_range, project_onto_direction,
};
use crg_core::gbt::{invert_latent_gbt, GbtConfig, GbtInit};
use crg_core::image::ImageTensor;
use crg_core::metrics::{dhash, phash, whash, HashCode};
use crg_core::models::{
    generator_architecture, Architecture, EncoderModel, GeneratorModel,
    LatentGenerator, LatentVector, LinearGenerator, ModelKind, OracleGenerator,
};
use crg_core::nn::{mae_grad, mse_grad, LayerSpec, Network};
use crg_core::stats::median;
use crg_core::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

mod desk;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stderr so the line shows up even when the harness captures output.
pub fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- P1: hashes against brute-force transforms ----------

fn gray(img: &ImageTensor) -> Vec<f64> {
    img.data().iter().map(|&v| (f64::from(v) + 1.0) / 2.0).collect()
}

fn bits_above(values: &[f64], threshold: f64) -> HashCode {
    HashCode(values.iter().fold(0u64, |acc, &v| (acc << 1) | u64::from(v > threshold)))
}

fn sorted_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Direct double sum of the orthonormal 2-D DCT-II for each of the 64 low frequencies.
fn brute_phash(img: &ImageTensor) -> HashCode {
    let g = gray(img);
    let n = 32.0_f64;
    let alpha = |k: usize| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
    let mut coef = Vec::with_capacity(64);
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for x in 0..32 {
                for y in 0..32 {
                    s += g[x * 32 + y]
                        * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos()
                        * (std::f64::consts::PI * (2 * y + 1) as f64 * v as f64 / (2.0 * n)).cos();
                }
            }
            coef.push(alpha(u) * alpha(v) * s);
        }
    }
    let med = sorted_median(coef[1..].to_vec());
    bits_above(&coef, med)
}

/// Two Haar approximation levels equal a 4x4 block mean up to a positive factor,
/// which leaves median-threshold bits unchanged.
fn brute_whash(img: &ImageTensor) -> HashCode {
    let g = gray(img);
    let mut coef = Vec::with_capacity(64);
    for r in 0..8 {
        for c in 0..8 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += g[(4 * r + i) * 32 + 4 * c + j];
                }
            }
            coef.push(s / 16.0);
        }
    }
    let med = sorted_median(coef.clone());
    bits_above(&coef, med)
}

#[test]
fn p1_hash_oracle_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(101);
    let mut mismatches = 0;
    for _ in 0..100 {
        let data = (0..1024).map(|_| r.random_range(-1.0f32..=1.0)).collect();
        let img = ImageTensor::new(32, 32, data).unwrap();
        mismatches += usize::from(phash(&img).unwrap() != brute_phash(&img));
        mismatches += usize::from(whash(&img).unwrap() != brute_whash(&img));
    }
    let mut closed_forms = true;
    for c in [-1.0f32, -0.3, 0.0, 0.55, 1.0] {
        closed_forms &= dhash(&ImageTensor::constant(32, 32, c).unwrap()).unwrap().0 == 0;
    }
    for _ in 0..20 {
        // Strictly increasing along each row with random positive increments.
        let mut data = Vec::with_capacity(1024);
        for _ in 0..32 {
            let steps: Vec<f32> = (0..32).map(|_| r.random_range(0.01f32..1.0)).collect();
            let total: f32 = steps.iter().sum();
            let mut acc = -1.0f32;
            for s in steps {
                acc += 1.9 * s / total;
                data.push(acc);
            }
        }
        closed_forms &= dhash(&ImageTensor::new(32, 32, data).unwrap()).unwrap().0 == u64::MAX;
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatches == 0 && closed_forms && secs < 10.0;
    report(
        "P1",
        pass,
        &format!("{mismatches} phash/whash mismatches over 100 images, dhash closed forms {closed_forms}, {secs:.2}s"),
    );
    assert!(pass);
}

// ---------- P2: direction and edit algebra ----------

fn normal_vec(r: &mut ChaCha8Rng, d: usize) -> LatentVector {
    LatentVector::new((0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

#[test]
fn p2_direction_algebra() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for d in [4, 32] {
        for _ in 0..1000 {
            let (z1, z2, zp) = (normal_vec(&mut r, d), normal_vec(&mut r, d), normal_vec(&mut r, d));
            let (k1, k2): (f64, f64) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
            let f = attribute_direction(&z1, &z2).unwrap();
            let b = attribute_direction(&z2, &z1).unwrap();
            for i in 0..d {
                worst = worst.max((f.raw.as_slice()[i] + b.raw.as_slice()[i]).abs());
                worst = worst.max((f.unit.as_slice()[i] + b.unit.as_slice()[i]).abs());
            }
            let twice = edit_latent(&edit_latent(&zp, &f, k1, false).unwrap(), &f, k2, false).unwrap();
            let once = edit_latent(&zp, &f, k1 + k2, false).unwrap();
            for (a, c) in twice.as_slice().iter().zip(once.as_slice()) {
                worst = worst.max((a - c).abs());
            }
            let same = edit_latent(&zp, &f, 0.0, false).unwrap();
            for (a, c) in same.as_slice().iter().zip(zp.as_slice()) {
                worst = worst.max((a - c).abs());
            }
            let shift = project_onto_direction(&edit_latent(&zp, &f, k1, false).unwrap(), &f).unwrap()
                - project_onto_direction(&zp, &f).unwrap();
            worst = worst.max((shift - k1 * f.raw_norm()).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && secs < 5.0;
    report("P2", pass, &format!("largest deviation {worst:.3e} over 2000 cases, {secs:.2}s"));
    assert!(pass);
}

// ---------- P3: gradients against central differences ----------

fn tiny_encoder() -> EncoderModel<f64> {
    let arch = Architecture {
        kind: ModelKind::Encoder,
        latent_dim: 4,
        resolution: 8,
        widths: vec![],
        layers: vec![
            LayerSpec::Reshape { shape: vec![64] },
            LayerSpec::Dense { inputs: 64, outputs: 16, spectral_norm: false },
            LayerSpec::Tanh,
            LayerSpec::Dense { inputs: 16, outputs: 4, spectral_norm: false },
        ],
        feature_tap: None,
    };
    EncoderModel::new(arch, &mut rng(303)).unwrap()
}

fn relative_gap(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

fn perturbed_loss(net: &Network<f64>, index: usize, delta: f64, loss: &dyn Fn(&Network<f64>) -> f64) -> f64 {
    let mut net = net.clone();
    let mut k = index;
    for p in net.params_mut() {
        if k < p.len() {
            p.data_mut()[k] += delta;
            break;
        }
        k -= p.len();
    }
    loss(&net)
}

#[test]
fn p3_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(304);
    let a: Vec<f64> = (0..64 * 4).map(|_| r.random_range(-0.5..0.5)).collect();
    let g = LinearGenerator::new(a, 4, (8, 8)).unwrap();
    let e = tiny_encoder();
    let z = Tensor::from_vec(&[3, 4], (0..12).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let x = Tensor::from_vec(&[3, 1, 8, 8], (0..192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();

    let loss_z = |net: &Network<f64>| latent_cycle_loss(&z, &net.forward(&g.generate(&z).unwrap()).unwrap()).unwrap();
    let loss_x = |net: &Network<f64>| image_cycle_loss(&x, &g.generate(&net.forward(&x).unwrap()).unwrap()).unwrap();

    let (zh, trace) = e.net.forward_traced(&g.generate(&z).unwrap()).unwrap();
    let grad_z = e.net.backward(&trace, &mse_grad(&z, &zh).unwrap(), true).unwrap().1.unwrap().flat();
    let (zx, trace) = e.net.forward_traced(&x).unwrap();
    let (xh, g_trace) = g.generate_traced(&zx).unwrap();
    let (dz, _) = g.backward(&g_trace, &mae_grad(&x, &xh).unwrap(), false).unwrap();
    let grad_x = e.net.backward(&trace, &dz, true).unwrap().1.unwrap().flat();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let j = r.random_range(0..grad_z.len());
        for (loss, grad) in [(&loss_z as &dyn Fn(&Network<f64>) -> f64, &grad_z), (&loss_x, &grad_x)] {
            let fd = (perturbed_loss(&e.net, j, 1e-4, loss) - perturbed_loss(&e.net, j, -1e-4, loss)) / 2e-4;
            worst = worst.max(relative_gap(fd, grad[j]));
        }
    }

    // Oracle generator: gradient of a random pixel weighting with respect to z. Box
    // coverage makes the renderer piecewise smooth, with kinks where an edge crosses a
    // pixel boundary; a central difference straddling one is no oracle. A probe whose own
    // forward and backward differences disagree is redrawn (the analytic value is not
    // consulted), and the count is reported.
    let oracle = OracleGenerator::new(4, 16).unwrap();
    let mut worst_oracle = 0.0f64;
    let (mut probes, mut redrawn) = (0, 0);
    while probes < 20 {
        let zv: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
        let w = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let objective = |zv: &[f64]| -> f64 {
            let img = LatentGenerator::<f64>::generate(&oracle, &Tensor::from_vec(&[1, 4], zv.to_vec()).unwrap()).unwrap();
            img.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let k = r.random_range(0..4);
        let (mut up, mut down) = (zv.clone(), zv.clone());
        up[k] += 1e-4;
        down[k] -= 1e-4;
        let (f_up, f_mid, f_down) = (objective(&up), objective(&zv), objective(&down));
        let (fwd, bwd) = ((f_up - f_mid) / 1e-4, (f_mid - f_down) / 1e-4);
        if relative_gap(fwd, bwd) > 1e-3 {
            redrawn += 1;
            continue;
        }
        let (_, trace) = LatentGenerator::<f64>::generate_traced(&oracle, &Tensor::from_vec(&[1, 4], zv.clone()).unwrap()).unwrap();
        let (gz, _) = LatentGenerator::<f64>::backward(&oracle, &trace, &w, false).unwrap();
        let fd = (f_up - f_down) / 2e-4;
        worst_oracle = worst_oracle.max(relative_gap(fd, gz.data()[k]));
        probes += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && worst_oracle < 1e-3 && secs < 60.0;
    report(
        "P3",
        pass,
        &format!(
            "worst relative gap: cycle losses {worst:.2e}, oracle pixels {worst_oracle:.2e} \
             ({redrawn} probes redrawn at kinks); {secs:.2}s"
        ),
    );
    assert!(pass);
}

// ---------- P4: gradient inversion of a linear generator ----------

#[test]
fn p4_linear_inversion_converges() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(404);
    let (a, cond, s_max) = loop {
        let a = DMatrix::<f64>::from_fn(16, 16, |i, j| {
            f64::from(u8::from(i == j)) * 3.0 + r.sample::<f64, _>(StandardNormal) * 0.4
        });
        let sv = a.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if hi / lo < 10.0 {
            break (a, hi / lo, hi);
        }
    };
    let z_true: Vec<f64> = (0..16).map(|_| r.sample(StandardNormal)).collect();
    let x = &a * nalgebra::DVector::from_vec(z_true);
    let exact = a.clone().lu().solve(&x).unwrap();
    let row_major: Vec<f64> = (0..16).flat_map(|i| (0..16).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
    let g = LinearGenerator::new(row_major, 16, (4, 4)).unwrap();
    let target = Tensor::from_vec(&[1, 1, 4, 4], x.iter().copied().collect()).unwrap();
    // The MSE Hessian is (2/16) A^T A; step 1/L with L its largest eigenvalue.
    let step = 8.0 / (s_max * s_max);
    let cfg = GbtConfig { steps: 5000, step_size: step, init: GbtInit::Seed(5), ..Default::default() };
    let out = invert_latent_gbt(&g, &target, &cfg).unwrap();
    let err = out.z_best.as_slice().iter().zip(exact.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    let pass = err < 1e-4 && secs < 30.0;
    report("P4", pass, &format!("condition {cond:.2}, max error {err:.2e} after 5000 steps, {secs:.2}s"));
    assert!(pass);
}

// ---------- P5: encoder trained against the oracle generator ----------

#[test]
fn p5_oracle_encoder_inversion() {
    let _g = serial();
    let t = Instant::now();
    let oracle = OracleGenerator::new(8, desk::P5_RESOLUTION).unwrap();
    let train_z = crg_core::models::sample_latents::<f32>(desk::P5_TRAIN_IMAGES, 8, &mut rng(501));
    let images = LatentGenerator::<f32>::generate(&oracle, &train_z).unwrap();
    let cfg = desk::p5_config();
    let out = train_encoder(oracle.clone(), &images, &cfg, None, |_| {}).unwrap();
    let held_out = crg_core::models::sample_latents::<f32>(1000, 8, &mut rng(502));
    let z_hat = out.encoder.encode(&LatentGenerator::<f32>::generate(&oracle, &held_out).unwrap()).unwrap();
    let errors: Vec<f64> = (0..1000)
        .flat_map(|i| (0..4).map(move |d| (i, d)))
        .map(|(i, d)| (f64::from(held_out.row(i)[d]) - f64::from(z_hat.row(i)[d])).powi(2))
        .collect();
    let med = median(&errors);
    let secs = t.elapsed().as_secs_f64();
    let pass = med < 0.05 && secs <= 900.0;
    report(
        "P5",
        pass,
        &format!(
            "median squared error {med:.4} on attribute dims (1000 held-out z), {} epochs, {secs:.0}s",
            out.epochs_run
        ),
    );

    // Encoder-initialized refinement against plain descent at equal budgets.
    let cfg = GbtConfig { steps: 30, step_size: 2.0, init: GbtInit::Seed(0), ..Default::default() };
    let mut wins = 0;
    let o4 = OracleGenerator::new(8, desk::P5_RESOLUTION).unwrap();
    for i in 0..50 {
        let x = LatentGenerator::<f32>::generate(&o4, &held_out.slice_rows(i, i + 1)).unwrap();
        let pure = invert_latent_gbt(&o4, &x, &GbtConfig { init: GbtInit::Seed(i as u64), ..cfg.clone() }).unwrap();
        let hybrid = crg_core::gbt::invert_hybrid(&o4, &out.encoder, &x, &cfg).unwrap();
        wins += usize::from(hybrid.refined.loss_best <= pure.loss_best);
    }
    report("P5 (hybrid inversion)", wins >= 40, &format!("hybrid at or below plain descent on {wins}/50 targets"));
    assert!(pass);
}

// ---------- P6: end-to-end desk run ----------

#[test]
fn p6_end_to_end_desk_run() {
    let _g = serial();
    let outcome = desk::run().unwrap();
    for (id, pass, detail) in &outcome.lines {
        report(id, *pass, detail);
    }
    assert!(outcome.lines.iter().all(|l| l.1));
}

// ---------- P7: fixed generator contract ----------

#[test]
fn p7_fixed_generator_contract() {
    let _g = serial();
    let mut r = rng(701);
    let generator = GeneratorModel::<f32>::new(generator_architecture(8, 16, &[16, 8, 4]).unwrap(), &mut r).unwrap();
    let images = generator.generate(&crg_core::models::sample_latents(64, 8, &mut r)).unwrap();
    let before = generator.parameter_digest();
    let cfg = CrgTrainConfig {
        batch_size: 16,
        max_epochs: 3,
        encoder_widths: vec![8, 16],
        ..Default::default()
    };
    let fixed = train_encoder(generator.clone(), &images, &cfg, None, |_| {}).unwrap();
    let fixed_digest = fixed.generator.parameter_digest();
    let co = train_encoder(
        generator.clone(),
        &images,
        &CrgTrainConfig { mode: CrgMode::CoTrained, max_epochs: 1, ..cfg },
        None,
        |_| {},
    )
    .unwrap();
    let co_digest = co.generator.parameter_digest();
    let pass = fixed_digest == before && co_digest != before && generator.parameter_digest() == before;
    report(
        "P7",
        pass,
        &format!(
            "fixed mode digest {} after {} epochs; co-trained digest {}",
            if fixed_digest == before { "unchanged" } else { "CHANGED" },
            fixed.epochs_run,
            if co_digest != before { "changed" } else { "UNCHANGED" }
        ),
    );
    assert!(pass);
}

// ---------- P8: k-range containment ----------

#[test]
fn p8_k_range_containment() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(801);
    let mut outside = 0;
    for case in 0..100 {
        let d = if case % 2 == 0 { 4 } else { 32 };
        let dir = attribute_direction(&normal_vec(&mut r, d), &normal_vec(&mut r, d)).unwrap();
        let neutral: Vec<f64> = (0..50).map(|_| r.sample::<f64, _>(StandardNormal) * 0.5 - 1.0).collect();
        let attributed: Vec<f64> = (0..50).map(|_| r.sample::<f64, _>(StandardNormal) * 0.3 + 1.5).collect();
        let mut stats = fit_two_gaussians(&neutral, &attributed).unwrap();
        stats.direction = Some(dir.unit.clone());
        let (lo_band, hi_band) = stats.band();
        let zp = normal_vec(&mut r, d);
        let use_unit = case % 3 == 0;
        let (k_lo, k_hi) = k_range(&zp, &dir, &stats, use_unit).unwrap();
        let k = r.random_range(k_lo..=k_hi);
        let p = project_onto_direction(&edit_latent(&zp, &dir, k, use_unit).unwrap(), &dir).unwrap();
        outside += usize::from(!(lo_band..=hi_band).contains(&p));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = outside == 0 && secs < 5.0;
    report("P8", pass, &format!("{outside}/100 edited projections outside the band, {secs:.3}s"));
    assert!(pass);
}
