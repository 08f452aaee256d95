use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use inncrypt_core::evaluation::{evaluate_image, EvalOptions};
use inncrypt_core::fed::{decrypt, encrypt, load_cipher, load_weights, save_cipher, write_atomic};
use inncrypt_core::imageio::{image_paths, load_image, rendering_to_rgb8, save_image, save_pfm, save_rgb8};
use inncrypt_core::keygen::{perturb_key, KeySchedule};
use inncrypt_core::metrics::{entropy8, mean_std, quality_metrics, render8, summarize, METRIC_COLUMNS, REPORT_SCHEMA};
use inncrypt_core::noise::{parse_weighted, NoiseSpec};
use inncrypt_core::training::{train_with, TrainConfig};
use inncrypt_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{Cli, Command, DecryptArgs, EncryptArgs, EvaluateArgs, KeyinfoArgs, PasswordArgs, TrainArgs};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        Error::Format(_) | Error::IncompatibleModel(_) => EXIT_FORMAT,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Train(a) => train(a, cli.seed, cli.verbose),
        Command::Encrypt(a) => cmd_encrypt(a, cli.verbose),
        Command::Decrypt(a) => cmd_decrypt(a, cli.verbose),
        Command::Evaluate(a) => cmd_evaluate(a, seed, cli.verbose),
        Command::Keyinfo(a) => cmd_keyinfo(a),
    }
}

fn read_password(p: &PasswordArgs) -> Result<Vec<u8>> {
    let pw = match (&p.password, &p.password_file) {
        (Some(s), _) => s.as_bytes().to_vec(),
        (None, Some(path)) => {
            let mut b = fs::read(path)?;
            if b.last() == Some(&b'\n') {
                b.pop();
                if b.last() == Some(&b'\r') {
                    b.pop();
                }
            }
            b
        }
        (None, None) => return Err(Error::InvalidArgument("a password is required".into())),
    };
    if pw.is_empty() {
        return Err(Error::InvalidArgument("password must not be empty".into()));
    }
    Ok(pw)
}

fn train(a: TrainArgs, seed: Option<u64>, verbose: bool) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    c.output_dir = Some(a.out_dir.clone());
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.steps = a.steps.unwrap_or(c.steps);
    c.image_size = a.image_size.unwrap_or(c.image_size);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.adam.lr = a.learning_rate.unwrap_or(c.adam.lr);
    c.arch.blocks = a.blocks.unwrap_or(c.arch.blocks);
    c.arch.growth = a.growth.unwrap_or(c.arch.growth);
    c.checkpoint_every = a.checkpoint_every.unwrap_or(c.checkpoint_every);
    c.kdf_iterations = a.kdf_iterations.unwrap_or(c.kdf_iterations);
    if !a.noise.is_empty() {
        c.noise = a.noise.iter().map(|s| parse_weighted(s)).collect::<Result<_>>()?;
    }
    c.check()?;
    let out = train_with(&c, |r| {
        if verbose {
            eprintln!(
                "step {:>6}  cipher {:.5}  triplet {:.5}  total {:.5}  |g| {:.3}{}",
                r.step,
                r.cipher_loss,
                r.triplet_loss,
                r.total,
                r.grad_norm,
                if r.clipped { "  clipped" } else { "" }
            );
        }
    })?;
    let model_path = a.out_dir.join("model.fcw");
    match out.log.last() {
        Some(r) => println!("trained {} steps, final total loss {:.6}", out.log.len(), r.total),
        None => println!("initialized model without training"),
    }
    println!("wrote {}", model_path.display());
    Ok(())
}

fn cmd_encrypt(a: EncryptArgs, verbose: bool) -> Result<()> {
    let password = read_password(&a.password)?;
    let image = load_image(&a.image)?;
    let (_, h, w) = image.dims3()?;
    if w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image width must be even (the pixel split halves each row), got {w}x{h}"
        )));
    }
    let model = load_weights(&a.model)?;
    let cipher = encrypt(&image, &password, &model)?;
    let rendering = render8(&cipher.payload)?;
    if let Some(p) = &a.preview {
        save_rgb8(&rendering_to_rgb8(&rendering)?, p)?;
    }
    save_cipher(&cipher, &a.out)?;
    if verbose {
        eprintln!("encrypted {w}x{h} image with model of {} parameters", model.param_count());
    }
    println!("cipher entropy: {:.4} bits", entropy8(&rendering));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_decrypt(a: DecryptArgs, verbose: bool) -> Result<()> {
    let password = read_password(&a.password)?;
    let reference = a.reference.as_ref().map(load_image).transpose()?;
    let cipher = load_cipher(&a.cipher)?;
    let model = load_weights(&a.model)?;
    let recovered = decrypt(&cipher, &password, &model)?;
    if let Some(p) = &a.float_out {
        save_pfm(&recovered, p)?;
    }
    save_image(&recovered, &a.out)?;
    if verbose {
        eprintln!("decrypted {}x{} cipher", cipher.width, cipher.height);
    }
    if let Some(r) = reference {
        let clamped = recovered.map(|v| v.clamp(0.0, 1.0));
        let q = quality_metrics(&r, &clamped)?;
        println!("psnr: {:.4} dB{}", q.psnr, if q.psnr_infinite { " (exact)" } else { "" });
        println!("ssim: {:.6}", q.ssim);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_evaluate(a: EvaluateArgs, seed: u64, verbose: bool) -> Result<()> {
    let noise: NoiseSpec = a.noise.parse()?;
    let fixed_password = a.password.as_ref().map(|p| p.as_bytes().to_vec());
    if fixed_password.as_ref().is_some_and(|p| p.is_empty()) {
        return Err(Error::InvalidArgument("password must not be empty".into()));
    }
    let paths = image_paths(&a.images)?;
    if paths.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no PNG/PPM images in {}", a.images.display()),
        )));
    }
    let model = load_weights(&a.model)?;
    let opts = EvalOptions {
        noise: noise.clone(),
        key_trials: a.password_trials,
        ..EvalOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for p in &paths {
        let image = load_image(p)?;
        let password = match &fixed_password {
            Some(pw) => pw.clone(),
            None => {
                let mut b = vec![0u8; 16];
                rng.fill(b.as_mut_slice());
                b
            }
        };
        let e = evaluate_image(&model, &image, &password, &opts, &mut rng)?;
        if verbose {
            eprintln!("{}: psnr {:.3} dB", p.display(), e.report.psnr.unwrap_or(f64::NAN));
        }
        rows.push((file_name(p), e));
    }

    let mut csv = format!("file,{},wrong_key_psnr\n", METRIC_COLUMNS.join(","));
    for (name, e) in &rows {
        let wk = e.wrong_key_psnr.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", name, e.report.csv_fields().join(","), wk));
    }
    let reports: Vec<_> = rows.iter().map(|(_, e)| e.report).collect();
    let mut summary = summarize(&reports);
    let wk: Vec<f64> = rows.iter().filter_map(|(_, e)| e.wrong_key_psnr).collect();
    if let Some(ms) = mean_std(&wk) {
        summary.metrics.insert("wrong_key_psnr".into(), ms);
    }
    let json = serde_json::json!({
        "schema": REPORT_SCHEMA,
        "images": summary.images,
        "noise": noise.to_string(),
        "password_trials": a.password_trials,
        "seed": seed,
        "metrics": summary.metrics,
    });
    fs::create_dir_all(&a.out)?;
    let csv_path: PathBuf = a.out.join("per_image.csv");
    let json_path = a.out.join("summary.json");
    write_atomic(&csv_path, csv.as_bytes())?;
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&json_path, format!("{text}\n").as_bytes())?;
    for (k, ms) in &summary.metrics {
        println!("{k}: {:.4} ± {:.4}", ms.mean, ms.std);
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_keyinfo(a: KeyinfoArgs) -> Result<()> {
    let password = read_password(&a.password)?;
    if let Some(bit) = a.flip_bit {
        if bit >= password.len() * 8 {
            return Err(Error::InvalidArgument(format!(
                "bit {bit} is outside a {}-bit password",
                password.len() * 8
            )));
        }
    }
    let s = KeySchedule::derive(&password, a.width, a.height)?;
    println!("size: {}x{}", a.width, a.height);
    println!("mask popcount: {} of {}", s.mask.popcount(), a.width * a.height);
    println!("mask sha256: {}", hex(&s.mask.digest()));
    println!("secret map mean: {:.6}", s.secret.mean());
    if let Some(bit) = a.flip_bit {
        let other = KeySchedule::derive(&perturb_key(&password, bit)?, a.width, a.height)?;
        let frac = s.mask.hamming(&other.mask) as f64 / (a.width * a.height) as f64;
        println!("mask hamming fraction after flipping bit {bit}: {frac:.6}");
    }
    Ok(())
}
