//! `vitcrypt`: key generation, image and model encryption, equivalence
//! checks and desk-scale experiments, one subcommand per step.
//!
//! Exit status is 0 on success, 1 when a verification or attack threshold
//! fails, and 2 for usage, input or format errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vitcrypt::cipher::{decrypt_image, encrypt_image, encrypt_model};
use vitcrypt::flsim::{
    finalize_with_encryption, round_logs_to_jsonl, run_federation, ClientState, FederationConfig,
};
use vitcrypt::harness::{plain_image_attack, random_key_attack, visual_protection_metrics};
use vitcrypt::keygen::{generate_key, load_key, save_key, KeyGeometry, MatrixMode};
use vitcrypt::synth::{class_dataset, SyntheticSpec};
use vitcrypt::tensorio::{
    export_visualization, load_any_image, save_image_tensor, write_atomic, ImageTensor, RangeTag,
};
use vitcrypt::vit::{
    accuracy, init_random_model, load_model, save_model, train_linear_head,
    verify_encrypted_pipeline, Dataset, Hyperparams, LOGIT_TOLERANCE, TOKEN_TOLERANCE,
};
use vitcrypt::Error;

#[derive(Parser)]
#[command(
    name = "vitcrypt",
    version,
    about = "Block-wise encryption for vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key manifest from a seed.
    Keygen(KeygenArgs),
    /// Encrypt a plain image (PNG, PPM or VTBT) into a VTBT tensor.
    EncryptImage(ImageArgs),
    /// Decrypt a VTBT tensor.
    DecryptImage(ImageArgs),
    /// Encrypt the patch and position embeddings of a model.
    EncryptModel(EncryptModelArgs),
    /// Create a model with random weights.
    InitModel(InitModelArgs),
    /// Fit the classification head on synthetic labeled images.
    TrainHead(TrainHeadArgs),
    /// Check that the encrypted pipeline reproduces the plain one.
    Verify(VerifyArgs),
    /// Plain-image and random-key attacks on an encrypted model.
    AttackEval(AttackArgs),
    /// Federated training followed by per-client encryption.
    FlSim(FlArgs),
    /// Render an image tensor as an 8-bit PNG.
    Viz(VizArgs),
}

#[derive(Args, Clone, Copy)]
struct ImageGeometry {
    /// Block (patch) size p.
    #[arg(long, default_value_t = 4)]
    block_size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Side of the square input images.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

impl ImageGeometry {
    fn num_blocks(&self) -> vitcrypt::Result<usize> {
        vitcrypt::layout::num_blocks(self.image_size, self.image_size, self.block_size)
    }
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    geometry: ImageGeometry,
    #[arg(long, default_value = "orthogonal")]
    mode: MatrixMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImageArgs {
    #[arg(long)]
    key: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit PNG rendering of the output.
    #[arg(long)]
    viz: Option<PathBuf>,
}

#[derive(Args)]
struct EncryptModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelShape {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args)]
struct InitModelArgs {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    geometry: ImageGeometry,
    #[command(flatten)]
    shape: ModelShape,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    model: PathBuf,
    /// Seed of the synthetic training set.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Plain model.
    #[arg(long)]
    model: PathBuf,
    /// Encrypted model; built from --model and --key when omitted.
    #[arg(long)]
    enc_model: Option<PathBuf>,
    #[arg(long)]
    key: PathBuf,
    /// Plain images or directories of them.
    #[arg(long = "in")]
    input: Vec<PathBuf>,
    /// Already-encrypted counterparts of --in, in the same order. Images are
    /// encrypted with --key when omitted.
    #[arg(long)]
    encrypted: Vec<PathBuf>,
    /// Number of synthetic images to check instead of --in.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative logit tolerance.
    #[arg(long, default_value_t = LOGIT_TOLERANCE)]
    tolerance: f64,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Plain baseline model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    enc_model: PathBuf,
    /// The key the encrypted model was built with.
    #[arg(long)]
    key: PathBuf,
    #[arg(long, default_value_t = 100)]
    num_keys: usize,
    /// Synthetic test images per key.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Seeds the test images and the wrong keys.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allowed margin of the wrong-key median above chance.
    #[arg(long, default_value_t = 0.15)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key agreement rates as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FlArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Training images per client.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    local_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[command(flatten)]
    geometry: ImageGeometry,
    #[command(flatten)]
    shape: ModelShape,
    #[arg(long, default_value = "orthogonal")]
    mode: MatrixMode,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plain original; prints correlation and PSNR against --in.
    #[arg(long)]
    reference: Option<PathBuf>,
}

enum Failure {
    Threshold(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Verification(_) | Error::NonFinite(_) => Failure::Threshold(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen(a) => keygen(a),
        Command::EncryptImage(a) => encrypt_image_cmd(a),
        Command::DecryptImage(a) => decrypt_image_cmd(a),
        Command::EncryptModel(a) => encrypt_model_cmd(a),
        Command::InitModel(a) => init_model(a),
        Command::TrainHead(a) => train_head(a),
        Command::Verify(a) => verify(a),
        Command::AttackEval(a) => attack_eval(a),
        Command::FlSim(a) => fl_sim(a),
        Command::Viz(a) => viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(msg)) => {
            eprintln!("vitcrypt: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("vitcrypt: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> vitcrypt::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn keygen(a: KeygenArgs) -> CmdResult {
    let n = a.geometry.num_blocks()?;
    let geometry = KeyGeometry::new(a.geometry.block_size, a.geometry.channels, n)?;
    let key = generate_key(a.seed, geometry, a.mode)?;
    save_key(&key, &a.out)?;
    println!("L={} N={}", key.block_len(), key.num_blocks());
    Ok(())
}

fn encrypt_image_cmd(a: ImageArgs) -> CmdResult {
    let key = load_key(&a.key)?;
    let img = load_any_image(&a.input)?;
    let enc = encrypt_image(&img, &key)?;
    save_image_tensor(&enc, &a.out)?;
    if let Some(path) = &a.viz {
        export_visualization(&enc, path)?;
    }
    Ok(())
}

fn decrypt_image_cmd(a: ImageArgs) -> CmdResult {
    let key = load_key(&a.key)?;
    let img = load_any_image(&a.input)?;
    let dec = decrypt_image(&img, &key)?;
    save_image_tensor(&dec, &a.out)?;
    if let Some(path) = &a.viz {
        export_visualization(&dec, path)?;
    }
    Ok(())
}

fn encrypt_model_cmd(a: EncryptModelArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let key = load_key(&a.key)?;
    save_model(&encrypt_model(&model, &key)?, &a.out)?;
    Ok(())
}

fn hyperparams(g: &ImageGeometry, s: &ModelShape) -> vitcrypt::Result<Hyperparams> {
    Hyperparams::new(
        g.block_size,
        g.channels,
        g.num_blocks()?,
        s.dim,
        s.depth,
        s.heads,
        s.classes,
    )
}

fn init_model(a: InitModelArgs) -> CmdResult {
    let hp = hyperparams(&a.geometry, &a.shape)?;
    save_model(&init_random_model(a.seed, hp)?, &a.out)?;
    Ok(())
}

/// Synthetic images matching a model's input geometry. Only square grids
/// of blocks are produced.
fn synthetic_spec(hp: &Hyperparams) -> vitcrypt::Result<SyntheticSpec> {
    let side = (hp.num_patches as f64).sqrt().round() as usize;
    if side * side != hp.num_patches {
        return Err(Error::InvalidParameter(format!(
            "synthetic data needs a square block grid, model has {} blocks",
            hp.num_patches
        )));
    }
    let px = side * hp.block_size;
    Ok(SyntheticSpec::new(px, px, hp.channels))
}

fn train_head(a: TrainHeadArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let hp = *model.hyperparams();
    let data = class_dataset(&synthetic_spec(&hp)?, hp.num_classes, a.samples, a.seed);
    let trained = train_linear_head(&model, &data, a.epochs, a.lr)?;
    println!("train accuracy {:.4}", accuracy(&trained, &data)?);
    save_model(&trained, &a.out)?;
    Ok(())
}

fn collect_image_paths(inputs: &[PathBuf]) -> vitcrypt::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| {
                    matches!(
                        q.extension().and_then(|x| x.to_str()),
                        Some("png" | "ppm" | "vtbt")
                    )
                })
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_images(inputs: &[PathBuf]) -> vitcrypt::Result<Vec<ImageTensor>> {
    collect_image_paths(inputs)?
        .iter()
        .map(|p| load_any_image(p))
        .collect()
}

fn verify(a: VerifyArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let key = load_key(&a.key)?;
    let enc_model = match &a.enc_model {
        Some(p) => load_model(p)?,
        None => encrypt_model(&model, &key)?,
    };
    let plain = match a.samples {
        Some(n) => {
            if !a.input.is_empty() {
                return Err(Failure::Usage("give either --in or --samples".into()));
            }
            let hp = model.hyperparams();
            class_dataset(&synthetic_spec(hp)?, hp.num_classes, n, a.seed).images
        }
        None => load_images(&a.input)?,
    };
    if plain.is_empty() {
        return Err(Failure::Usage("no images to verify".into()));
    }
    if let Some(bad) = plain.iter().position(|x| x.range() != RangeTag::Plain) {
        return Err(Failure::Usage(format!(
            "input image {bad} is not a plain image"
        )));
    }
    let encrypted = if a.encrypted.is_empty() {
        plain
            .iter()
            .map(|x| encrypt_image(x, &key))
            .collect::<vitcrypt::Result<Vec<_>>>()?
    } else {
        load_images(&a.encrypted)?
    };
    let mut report = verify_encrypted_pipeline(&model, &enc_model, &key, &plain, &encrypted)?;
    report.logit_tolerance = a.tolerance;
    report.passed =
        report.z0_relative_error() < TOKEN_TOLERANCE && report.logit_relative_error() < a.tolerance;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{text}");
    if let Some(path) = &a.out {
        write_json(&report, path)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Threshold(format!(
            "equivalence check failed: token error {:e}, logit error {:e}",
            report.z0_relative_error(),
            report.logit_relative_error()
        )))
    }
}

#[derive(Serialize)]
struct AttackOutput {
    plain_image_agreement: f64,
    random_keys: vitcrypt::harness::AttackReport,
    chance: f64,
    median_limit: f64,
    passed: bool,
}

fn attack_eval(a: AttackArgs) -> CmdResult {
    let baseline = load_model(&a.model)?;
    let enc_model = load_model(&a.enc_model)?;
    let key = load_key(&a.key)?;
    let hp = *baseline.hyperparams();
    let test = class_dataset(&synthetic_spec(&hp)?, hp.num_classes, a.samples, a.seed).images;
    let plain_rate = plain_image_attack(&enc_model, &test, &baseline)?;
    let report = random_key_attack(&enc_model, &baseline, &key, a.num_keys, &test, a.seed)?;
    print!("{}", report.to_table());
    println!("plain images      {plain_rate:.4}");
    let chance = 1.0 / hp.num_classes as f64;
    let median_limit = chance + a.tolerance;
    let passed = report.true_key_agreement == 1.0 && report.stats.median <= median_limit;
    if let Some(path) = &a.csv {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    let out = AttackOutput {
        plain_image_agreement: plain_rate,
        random_keys: report,
        chance,
        median_limit,
        passed,
    };
    if let Some(path) = &a.out {
        write_json(&out, path)?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Threshold(format!(
            "access control not demonstrated: true key {:.4}, wrong-key median {:.4} > {median_limit:.4}",
            out.random_keys.true_key_agreement, out.random_keys.stats.median
        )))
    }
}

#[derive(Serialize)]
struct ClientSummary {
    id: usize,
    key_seed: u64,
    plain_accuracy: f64,
    encrypted_accuracy: f64,
}

#[derive(Serialize)]
struct FlSummary {
    clients: Vec<ClientSummary>,
    final_checksum: String,
    passed: bool,
}

/// Derived seeds for the federation's data and keys, so one `--seed`
/// drives the whole run.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = vitcrypt::keygen::SplitMix64::new(seed ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    rng.next_u64()
}

fn fl_sim(a: FlArgs) -> CmdResult {
    if a.clients == 0 {
        return Err(Failure::Usage("--clients must be at least 1".into()));
    }
    let hp = hyperparams(&a.geometry, &a.shape)?;
    let spec = synthetic_spec(&hp)?;
    let init = init_random_model(sub_seed(a.seed, 1), hp)?;
    let mut clients: Vec<ClientState> = (0..a.clients)
        .map(|id| ClientState {
            id,
            model: init.clone(),
            shard: class_dataset(
                &spec,
                hp.num_classes,
                a.samples,
                sub_seed(a.seed, 100 + id as u64),
            ),
            key: None,
        })
        .collect();
    let config = FederationConfig {
        rounds: a.rounds,
        local_epochs: a.local_epochs,
        lr: a.lr,
    };
    let (global, logs) = run_federation(&init, &mut clients, config)?;

    let key_seeds: Vec<u64> = (0..a.clients)
        .map(|id| sub_seed(a.seed, 200 + id as u64))
        .collect();
    let encrypted = finalize_with_encryption(&global, &key_seeds, a.mode)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_atomic(
        &a.out.join("rounds.jsonl"),
        round_logs_to_jsonl(&logs)?.as_bytes(),
    )?;
    save_model(&global, &a.out.join("global.vtbt"))?;

    let mut summaries = Vec::new();
    for (client, (enc_model, key)) in clients.iter_mut().zip(encrypted) {
        let test_seed = sub_seed(a.seed, 300 + client.id as u64);
        let test = class_dataset(&spec, hp.num_classes, a.samples, test_seed);
        let enc_test = Dataset::new(
            test.images
                .iter()
                .map(|x| encrypt_image(x, &key))
                .collect::<vitcrypt::Result<Vec<_>>>()?,
            test.labels.clone(),
        )?;
        let summary = ClientSummary {
            id: client.id,
            key_seed: key_seeds[client.id],
            plain_accuracy: accuracy(&global, &test)?,
            encrypted_accuracy: accuracy(&enc_model, &enc_test)?,
        };
        println!(
            "client {} plain {:.4} encrypted {:.4}",
            summary.id, summary.plain_accuracy, summary.encrypted_accuracy
        );
        save_key(&key, &a.out.join(format!("client{}.key.json", client.id)))?;
        save_model(
            &enc_model,
            &a.out.join(format!("client{}.enc.vtbt", client.id)),
        )?;
        client.key = Some(key);
        summaries.push(summary);
    }
    let passed = summaries
        .iter()
        .all(|s| s.plain_accuracy == s.encrypted_accuracy);
    let summary = FlSummary {
        clients: summaries,
        final_checksum: logs.last().map(|l| l.checksum.clone()).unwrap_or_default(),
        passed,
    };
    write_json(&summary, &a.out.join("summary.json"))?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Threshold(
            "encrypted accuracy differs from plain accuracy".into(),
        ))
    }
}

fn viz(a: VizArgs) -> CmdResult {
    let img = load_any_image(&a.input)?;
    export_visualization(&img, &a.out)?;
    if let Some(reference) = &a.reference {
        let plain = load_any_image(reference)?;
        let m = visual_protection_metrics(&plain, &img)?;
        println!("pearson {:.4} psnr {:.2}", m.pearson_corr, m.psnr);
    }
    Ok(())
}
