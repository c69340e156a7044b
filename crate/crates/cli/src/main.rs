use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagdrive_core::activation::{
    activate, provision_code, provision_disc, PurchaseSecret, SerialRegistry,
};
use tagdrive_core::content::{
    open_content, seal_content_with, split_sectors, SealedImage, DEFAULT_SECTOR_SIZE,
};
use tagdrive_core::exec::Execution;
use tagdrive_core::model::{
    CodeDatabase, FrequencyBand, TagCode, VisibleSerial, DEFAULT_CODE_WIDTH,
};
use tagdrive_core::persist::{
    load_codedb, load_registry, save_codedb, save_registry, write_atomic,
};
use tagdrive_core::scenario::{DiscSpec, ScenarioFile};
use tagdrive_service::{serve_file, ActivationClient, ClientError, ENV_BIND, ENV_REGISTRY};

#[derive(Parser)]
#[command(name = "tagdrive", version, about = "RFID-gated disc drive toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mint discs into a vendor registry and print their serials and secrets
    Provision(ProvisionArgs),
    /// Unlock a disc's code and add it to the local code database
    Activate(ActivateArgs),
    /// Serve a registry over HTTP
    Serve(ServeArgs),
    /// Run an insertion scenario and write PREFIX.csv and PREFIX.vcd
    Run(RunArgs),
    /// Seal a file into a disc image bound to a tag code and serial
    Seal(SealArgs),
    /// Decrypt a disc image
    Open(OpenArgs),
}

#[derive(Args)]
struct ProvisionArgs {
    #[arg(short = 'n', long = "count")]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_CODE_WIDTH)]
    width: u32,
    #[arg(long)]
    registry: PathBuf,
    /// Seed for codes, serials and secrets (OS entropy if absent)
    #[arg(long)]
    seed: Option<u64>,
    /// Use these codes instead of random ones, one per disc
    #[arg(long, value_delimiter = ',')]
    codes: Vec<String>,
    #[arg(long, default_value = "HF_13_56MHz")]
    band: String,
    /// Also write one disc document per serial into this directory
    #[arg(long)]
    discs: Option<PathBuf>,
    /// Provision timestamp, RFC 3339 (defaults to now)
    #[arg(long)]
    at: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct ActivateArgs {
    #[arg(long)]
    serial: String,
    #[arg(long)]
    secret: String,
    #[arg(long)]
    db: PathBuf,
    #[arg(
        long,
        conflicts_with = "registry",
        required_unless_present = "registry"
    )]
    url: Option<String>,
    /// Read the blob from a local registry file instead of the service
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Width for a new database (ignored when the database exists)
    #[arg(long)]
    width: Option<u32>,
    /// Activation timestamp, RFC 3339 (defaults to now)
    #[arg(long)]
    at: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = ENV_REGISTRY)]
    registry: PathBuf,
    #[arg(long, env = ENV_BIND)]
    bind: String,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(short = 'o', long = "out")]
    prefix: PathBuf,
}

#[derive(Args)]
struct DiscKey {
    /// Disc document holding the serial and tag
    #[arg(long, conflicts_with_all = ["code", "serial"], required_unless_present_all = ["code", "serial"])]
    disc: Option<PathBuf>,
    #[arg(long, requires = "serial")]
    code: Option<String>,
    #[arg(long, requires = "code")]
    serial: Option<String>,
}

#[derive(Args)]
struct SealArgs {
    #[command(flatten)]
    key: DiscKey,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SECTOR_SIZE)]
    sector_size: u32,
    /// Seed for sector nonces (OS entropy if absent)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OpenArgs {
    #[command(flatten)]
    key: DiscKey,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

/// Exit status contract.
enum Failure {
    Data(anyhow::Error),
    Unreachable(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn rng_for(seed: Option<u64>) -> Box<dyn RngCore> {
    match seed {
        Some(s) => Box::new(ChaCha8Rng::seed_from_u64(s)),
        None => Box::new(StdRng::from_os_rng()),
    }
}

fn parse_band(text: &str) -> anyhow::Result<FrequencyBand> {
    serde_json::from_value(serde_json::Value::String(text.to_owned()))
        .map_err(|_| anyhow!("unknown band {text:?}"))
}

fn provision(args: ProvisionArgs) -> anyhow::Result<()> {
    if !args.codes.is_empty() && args.codes.len() != args.count {
        bail!(
            "--codes lists {} codes for {} discs",
            args.codes.len(),
            args.count
        );
    }
    let band = parse_band(&args.band)?;
    let mut registry = if args.registry.exists() {
        let r = load_registry(&args.registry)?;
        if r.width() != args.width {
            bail!("registry width is {}, not {}", r.width(), args.width);
        }
        r
    } else {
        SerialRegistry::new(args.width)?
    };
    let codes = args
        .codes
        .iter()
        .map(|c| TagCode::parse(c, args.width))
        .collect::<Result<Vec<_>, _>>()?;
    if args.count == 0 {
        return Ok(());
    }
    let now = args.at.unwrap_or_else(Utc::now);
    let mut rng = rng_for(args.seed);
    let mut minted = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let secret = PurchaseSecret::generate(&mut rng);
        let disc = match codes.get(i) {
            Some(code) => {
                provision_code(&mut registry, code.clone(), &secret, band, &mut rng, now)?
            }
            None => provision_disc(&mut registry, &secret, band, &mut rng, now)?,
        };
        minted.push((disc, secret));
    }
    if let Some(dir) = &args.discs {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        for (disc, _) in &minted {
            let spec = DiscSpec {
                serial: disc.serial.clone(),
                title: String::new(),
                tag: Some(disc.tag.clone()),
                image: None,
            };
            let text = serde_json::to_string_pretty(&spec)? + "\n";
            write_atomic(&dir.join(format!("{}.json", disc.serial)), text.as_bytes())?;
        }
    }
    save_registry(&args.registry, &registry)?;
    for (disc, secret) in &minted {
        println!("{}\t{}", disc.serial, secret.as_str());
    }
    Ok(())
}

fn activate_cmd(args: ActivateArgs) -> Result<(), Failure> {
    let serial = VisibleSerial::new(args.serial).map_err(anyhow::Error::from)?;
    let secret = PurchaseSecret::new(&args.secret).map_err(anyhow::Error::from)?;
    let (blob, registry_width) = match (&args.url, &args.registry) {
        (Some(url), _) => {
            let blob = ActivationClient::new(url)
                .fetch_blob(&serial)
                .map_err(|e| match e {
                    ClientError::Unreachable(_) => Failure::Unreachable(e.into()),
                    other => Failure::Data(other.into()),
                })?;
            (blob, None)
        }
        (None, Some(path)) => {
            let registry = load_registry(path).map_err(anyhow::Error::from)?;
            let entry = registry
                .get(&serial)
                .ok_or_else(|| anyhow!("serial {serial} not in {}", path.display()))?;
            (entry.blob.clone(), Some(registry.width()))
        }
        (None, None) => return Err(anyhow!("need --url or --registry").into()),
    };
    let mut db = if args.db.exists() {
        load_codedb(&args.db).map_err(anyhow::Error::from)?
    } else {
        let width = args.width.or(registry_width).unwrap_or(DEFAULT_CODE_WIDTH);
        CodeDatabase::new(width).map_err(anyhow::Error::from)?
    };
    activate(
        &mut db,
        &blob,
        &secret,
        &serial,
        args.at.unwrap_or_else(Utc::now),
    )
    .with_context(|| format!("activating {serial}"))?;
    save_codedb(&args.db, &db).map_err(anyhow::Error::from)?;
    println!("activated {serial}");
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> anyhow::Result<()> {
    let svc = serve_file(&args.registry, &args.bind)?;
    println!("listening on {}", svc.url());
    svc.wait()?;
    Ok(())
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run_cmd(args: RunArgs) -> anyhow::Result<()> {
    let file = ScenarioFile::load(&args.scenario)?;
    let base = args.scenario.parent().unwrap_or(Path::new(""));
    let run = file.resolve(base)?.run()?;
    write_atomic(
        &with_extension(&args.prefix, "csv"),
        run.trace.to_csv().as_bytes(),
    )?;
    write_atomic(
        &with_extension(&args.prefix, "vcd"),
        run.trace.to_vcd().as_bytes(),
    )?;
    for r in &run.insertions {
        let outcome = r.outcome.map(|s| s.name()).unwrap_or("Removed");
        println!("{}\t{}\t{}\t{}", r.t_ms, r.serial, r.reads, outcome);
    }
    Ok(())
}

fn disc_key(key: &DiscKey) -> anyhow::Result<(TagCode, VisibleSerial)> {
    match (&key.disc, &key.code, &key.serial) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
            let spec: DiscSpec =
                serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
            let tag = spec
                .tag
                .ok_or_else(|| anyhow!("{} has no tag", path.display()))?;
            Ok((tag.code().clone(), spec.serial))
        }
        (None, Some(code), Some(serial)) => Ok((
            TagCode::parse_any(code)?,
            VisibleSerial::new(serial.as_str())?,
        )),
        _ => bail!("need --disc or --code with --serial"),
    }
}

fn seal_cmd(args: SealArgs) -> anyhow::Result<()> {
    let (code, serial) = disc_key(&args.key)?;
    let data = fs::read(&args.input).with_context(|| format!("{}", args.input.display()))?;
    let sectors = split_sectors(&data, args.sector_size);
    let mut rng = rng_for(args.seed);
    let image = seal_content_with(
        &sectors,
        &code,
        &serial,
        args.sector_size,
        &mut rng,
        Execution::default(),
    )?;
    write_atomic(&args.output, &image.to_bytes())?;
    println!("sealed {} sectors for {serial}", sectors.len());
    Ok(())
}

fn open_cmd(args: OpenArgs) -> anyhow::Result<()> {
    let (code, serial) = disc_key(&args.key)?;
    let bytes = fs::read(&args.input).with_context(|| format!("{}", args.input.display()))?;
    let image = SealedImage::from_bytes(&bytes)?;
    let sectors = open_content(&image, &code, &serial)?;
    write_atomic(&args.output, &sectors.concat())?;
    println!("opened {} sectors", sectors.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Provision(a) => provision(a).map_err(Failure::from),
        Command::Activate(a) => activate_cmd(a),
        Command::Serve(a) => serve_cmd(a).map_err(Failure::from),
        Command::Run(a) => run_cmd(a).map_err(Failure::from),
        Command::Seal(a) => seal_cmd(a).map_err(Failure::from),
        Command::Open(a) => open_cmd(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Unreachable(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
