use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sbir_core::ablation::{run_ablation, standard_plan, table_to_tsv};
use sbir_core::config::{Config, Granularity, InfluenceMode};
use sbir_core::data::netpbm;
use sbir_core::data::{generate_corpus, Corpus, GenerateSpec, Split};
use sbir_core::explain::{
    correspondences, influence_drops, most_influential_pair, patch_replace_synthesis, provenance_to_tsv,
    self_attention_map, write_text, GalleryItem,
};
use sbir_core::image::{ImageSample, Modality};
use sbir_core::model::Model;
use sbir_core::retrieval::{evaluate, write_rankings, EvalSet, RankMode};
use sbir_core::training::{train, write_trace};

#[derive(Parser)]
#[command(name = "sbir", version, about = "Sketch/photo matching: data, training, retrieval and explanations")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint to write (train) or read (everything else).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural corpus and its manifest.
    GenData(GenData),
    /// Train on the manifest's training split.
    Train(Train),
    /// Rank the test gallery for every test sketch and report metrics.
    Eval(Eval),
    /// Retrieval-token attention map of one image.
    AttnMap(AttnMap),
    /// Top-k photo patches for every sketch patch.
    Correspond(Correspond),
    /// Patch-replacement synthesis of a test sketch from the gallery.
    Synth(Synth),
    /// Kernel pair whose removal lowers the relation score most.
    Influence(Influence),
    /// Train and evaluate every component ablation.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    categories: usize,
    #[arg(long, default_value_t = 10)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    train_fraction: f64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ret,
    Rn,
}

impl From<ModeArg> for RankMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ret => RankMode::Ret,
            ModeArg::Rn => RankMode::Rn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Category,
    Instance,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "rn")]
    mode: ModeArg,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Truncate AP at this many ranks (0 = whole gallery).
    #[arg(long)]
    map_cutoff: Option<usize>,
    #[arg(long, value_enum, default_value = "category")]
    granularity: GranularityArg,
    /// Directory for `ranking-<mode>.txt` and `metrics-<mode>.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnMap {
    /// `.pgm` is read as a sketch, `.ppm` as a photo.
    #[arg(long)]
    image: PathBuf,
    /// 1-based encoder block; the last one by default.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Output grayscale pixmap.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Correspond {
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long)]
    photo: PathBuf,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Synth {
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest record index of the query sketch; the first test sketch by default.
    #[arg(long)]
    query: Option<usize>,
    /// Photo patches averaged per sketch patch.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Use only the top relation-ranked photo instead of the whole gallery.
    #[arg(long)]
    retrieved: bool,
    /// Directory for `synth-<query>.ppm` and `provenance-<query>.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InfluenceArg {
    Entry,
    RowColumn,
}

#[derive(Args)]
struct Influence {
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long)]
    photo: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<InfluenceArg>,
    /// Also write every pair's score drop here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train the variants concurrently.
    #[arg(long)]
    concurrent: bool,
    #[arg(long)]
    out: PathBuf,
}

fn sidecar(checkpoint: &Path, ext: &str) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

struct Ctx {
    cli_config: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    overrides: Vec<String>,
}

impl Ctx {
    /// Config file, else the checkpoint's sidecar, else defaults; then
    /// overrides and the seed.
    fn config(&self, use_sidecar: bool) -> Result<Config> {
        let mut cfg = match (&self.cli_config, &self.checkpoint) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(c)) if use_sidecar && sidecar(c, ".cfg").exists() => Config::load(&sidecar(c, ".cfg"))?,
            _ => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().context("--checkpoint is required")
    }

    fn model(&self) -> Result<(Config, Model)> {
        let cfg = self.config(true)?;
        let path = self.checkpoint()?;
        if !path.exists() {
            bail!("checkpoint not found: {}", path.display());
        }
        let model = Model::load(&cfg.model, path)?;
        Ok((cfg, model))
    }
}

/// Loading validates the manifest, which includes the zero-shot guard: a test
/// category among the training records aborts.
fn load_corpus(manifest: &Path) -> Result<Corpus> {
    if !manifest.is_file() {
        bail!("manifest not found: {}", manifest.display());
    }
    Ok(Corpus::load(manifest)?)
}

fn read_image(path: &Path) -> Result<ImageSample> {
    let modality = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => Modality::Sketch,
        Some("ppm") => Modality::Photo,
        _ => bail!("{}: expected a .pgm sketch or .ppm photo", path.display()),
    };
    Ok(netpbm::read(path, modality)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn gen_data(ctx: &Ctx, a: &GenData) -> Result<()> {
    let spec = GenerateSpec {
        n_categories: a.categories,
        pairs_per_category: a.pairs,
        image_size: a.size,
        seed: ctx.seed.unwrap_or(GenerateSpec::default().seed),
        train_fraction: a.train_fraction,
    };
    let corpus = generate_corpus(&spec, &a.out)?;
    let train = corpus.categories(Some(Split::Train));
    let test = corpus.categories(Some(Split::Test));
    println!(
        "wrote {} records to {} (train categories {train:?}, test categories {test:?})",
        corpus.records.len(),
        a.out.join("manifest.tsv").display()
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &Train) -> Result<()> {
    let mut cfg = ctx.config(false)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let ckpt = ctx.checkpoint()?.to_path_buf();
    let corpus = load_corpus(&a.manifest)?;
    let pairs = corpus.pairs(Split::Train)?;
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    let trace = train(&mut model, &pairs, &cfg.train, |e| {
        println!("epoch {:>3}  triplet {:.6}  relation {:.6}  total {:.6}", e.epoch, e.triplet, e.relation, e.total);
    })?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    model.save(&ckpt)?;
    cfg.save(&sidecar(&ckpt, ".cfg"))?;
    write_trace(&sidecar(&ckpt, ".loss.csv"), &trace)?;
    println!("saved {} ({} parameters)", ckpt.display(), model.num_params());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: &Eval) -> Result<()> {
    let (mut cfg, model) = ctx.model()?;
    if let Some(k) = &a.k {
        cfg.eval.ks = k.clone();
    }
    if let Some(c) = a.map_cutoff {
        cfg.eval.map_cutoff = c;
    }
    let corpus = load_corpus(&a.manifest)?;
    let set = EvalSet::from_corpus(&corpus, Split::Test)?;
    let (queries, gallery) = set.embed(&model)?;
    let granularity = match a.granularity {
        GranularityArg::Category => Granularity::Category,
        GranularityArg::Instance => Granularity::Instance,
    };
    let mode = RankMode::from(a.mode);
    let (rankings, report) = evaluate(&model, &queries, &gallery, mode, &cfg.eval, granularity)?;
    create_dir(&a.out)?;
    write_rankings(&a.out.join(format!("ranking-{}.txt", mode.as_str())), &rankings)?;
    let text = report.to_text();
    write_text(&a.out.join(format!("metrics-{}.txt", mode.as_str())), &text)?;
    for line in text.lines().filter(|l| !l.starts_with("ap.")) {
        println!("{line}");
    }
    Ok(())
}

fn attn_map(ctx: &Ctx, a: &AttnMap) -> Result<()> {
    let (cfg, model) = ctx.model()?;
    let img = read_image(&a.image)?;
    let map = self_attention_map(&model, &img, a.layer, a.head)?;
    netpbm::write_pgm(&a.out, &map.to_image(cfg.model.patch_size))?;
    println!("layer {} head {} -> {}", map.layer, map.head, a.out.display());
    Ok(())
}

fn correspond(ctx: &Ctx, a: &Correspond) -> Result<()> {
    let (cfg, model) = ctx.model()?;
    let s = model.embed(&read_image(&a.sketch)?)?;
    let p = model.embed(&read_image(&a.photo)?)?;
    let (r, m) = model.pair_eval(&s, &p)?;
    let set = correspondences(&m, a.top_k.unwrap_or(cfg.explain.top_k))?;
    write_text(&a.out, &set.to_tsv())?;
    println!("relation score {r:.6}; {} rows -> {}", set.rows.len(), a.out.display());
    if set.truncated {
        println!("note: fewer live photo tokens than top_k");
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: &Synth) -> Result<()> {
    let (cfg, model) = ctx.model()?;
    let corpus = load_corpus(&a.manifest)?;
    let sketches = corpus.select(Split::Test, Modality::Sketch);
    let q = match a.query {
        Some(q) if q < corpus.records.len() && corpus.records[q].modality == Modality::Sketch => q,
        Some(q) => bail!("record {q} is not a sketch in {}", a.manifest.display()),
        None => *sketches.first().context("no test sketches")?,
    };
    let sketch = corpus.load_image(q)?;
    let sketch_seq = model.embed(&sketch)?;
    let ids = corpus.select(Split::Test, Modality::Photo);
    let photos = corpus.load_images(&ids)?;
    let seqs = photos.iter().map(|p| model.embed(p)).collect::<sbir_core::Result<Vec<_>>>()?;
    let mut items: Vec<GalleryItem> = ids
        .iter()
        .zip(&photos)
        .zip(&seqs)
        .map(|((&id, image), seq)| GalleryItem { id: id as u64, image, seq })
        .collect();
    if a.retrieved {
        let scores = items
            .iter()
            .map(|g| model.relation_score(&sketch_seq, g.seq))
            .collect::<sbir_core::Result<Vec<_>>>()?;
        let best = (0..items.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        items = vec![items.swap_remove(best)];
    }
    let out = patch_replace_synthesis(&model, &sketch, &sketch_seq, &items, a.k)?;
    create_dir(&a.out)?;
    let img_path = a.out.join(format!("synth-{q}.ppm"));
    netpbm::write_ppm(&img_path, &out.image)?;
    write_text(&a.out.join(format!("provenance-{q}.tsv")), &provenance_to_tsv(&out.provenance))?;
    let used: HashSet<u64> = out.provenance.iter().flat_map(|p| p.sources.iter().map(|s| s.image_id)).collect();
    println!(
        "query {q}: {} patches from {} photos (patch size {}) -> {}",
        out.provenance.len(),
        used.len(),
        cfg.model.patch_size,
        img_path.display()
    );
    Ok(())
}

fn influence(ctx: &Ctx, a: &Influence) -> Result<()> {
    let (cfg, model) = ctx.model()?;
    let mode = match a.mode {
        Some(InfluenceArg::Entry) => InfluenceMode::Entry,
        Some(InfluenceArg::RowColumn) => InfluenceMode::RowColumn,
        None => cfg.explain.influence,
    };
    let s = model.embed(&read_image(&a.sketch)?)?;
    let p = model.embed(&read_image(&a.photo)?)?;
    let (_, m) = model.pair_eval(&s, &p)?;
    let best = most_influential_pair(&model, &m, mode)?;
    println!(
        "score {:.6}; most influential pair sketch {} photo {} (drop {:.6})",
        best.full, best.i, best.j, best.drop
    );
    if let Some(out) = &a.out {
        let mut text = String::from("sketch_patch\tphoto_patch\tdrop\n");
        for (i, j, d) in influence_drops(&model, &m, mode)? {
            text.push_str(&format!("{i}\t{j}\t{d:e}\n"));
        }
        write_text(out, &text)?;
    }
    Ok(())
}

fn ablate(ctx: &Ctx, a: &Ablate) -> Result<()> {
    let mut cfg = ctx.config(false)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let corpus = load_corpus(&a.manifest)?;
    let pairs = corpus.pairs(Split::Train)?;
    let test = EvalSet::from_corpus(&corpus, Split::Test)?;
    let rows = run_ablation(&standard_plan(), &cfg, &pairs, &test, a.concurrent)?;
    let table = table_to_tsv(&rows);
    write_text(&a.out, &table)?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.outcome.is_err() || !r.parity_ok()).count();
    if failed > 0 {
        bail!("{failed} ablation variants failed or broke parameter parity");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        cli_config: cli.config,
        seed: cli.seed,
        checkpoint: cli.checkpoint,
        overrides: cli.overrides,
    };
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::AttnMap(a) => attn_map(&ctx, a),
        Command::Correspond(a) => correspond(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Influence(a) => influence(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
