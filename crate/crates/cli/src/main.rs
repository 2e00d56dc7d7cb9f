//! `wttf`: data preparation, clustering, weather-time testing, training,
//! ablation and reporting from a single TOML config.

mod report;
mod table;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wttf_core::classifier::ExampleSet;
use wttf_core::data::{
    generate_synthetic, ingest_csv, write_csv_file, ColumnMap, ConditionSpace, Trajectory,
};
use wttf_core::pipeline::{
    evaluate, label_with_model, load_classifier, load_datp, load_trajectories, prepare, run_pipeline,
    write_file, write_outputs, DataSource, Prepared, RunConfig, RunReport,
};
use wttf_core::cluster::ClusterModel;
use wttf_core::stats::chi_square_test;
use wttf_core::{Error, ErrorClass, Result};

use table::NamedTable;

#[derive(Parser)]
#[command(name = "wttf", version, about = "Weather-time aware destination classification and trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Canonical,
    Atc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    Config,
    Report,
}

#[derive(clap::Args)]
struct OutDir {
    /// Output directory; falls back to `out_dir` in the config, then `wttf-out`.
    #[arg(long, env = "WTTF_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration (defaults when no file is given).
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the JSON schema of the config or the run report.
    PrintSchema {
        #[arg(value_enum, default_value = "report")]
        kind: SchemaKind,
    },
    /// Generate the configured synthetic scenario as canonical CSV.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert raw tracking files to canonical CSV.
    Ingest {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "canonical")]
        format: Format,
        /// Supplies the dataset section (calendar, peak windows, unit scale).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster endpoints and merge undersampled clusters, or merge a stored table.
    Cluster {
        #[arg(long, conflicts_with = "table", required_unless_present = "table")]
        config: Option<PathBuf>,
        /// Contingency CSV (`class[,x,y],<condition>...`).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where to write the merged table when `--table` is given.
        #[arg(long, requires = "table")]
        out: Option<PathBuf>,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Chi-square test of destination against weather-time condition.
    WtTest {
        #[arg(long, conflicts_with = "table", required_unless_present = "table")]
        config: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Cross-validate the classifier with weather-time input.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Paired comparison of classifiers with and without weather-time input.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Evaluate stored checkpoints of one rotation.
    Eval {
        /// Directory written by `train` or `ablate`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        rotation: usize,
        /// Checkpoint name inside the rotation directory; defaults to the
        /// with-WT classifier.
        #[arg(long)]
        classifier: Option<String>,
        /// Canonical CSV to evaluate on; defaults to the run's data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render markdown tables and SVG plots from a stored report.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(flag: &OutDir, cfg: &RunConfig) -> PathBuf {
    flag.out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("wttf-out"))
}

fn condition_summary(trajs: &[Trajectory], space: ConditionSpace) -> String {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in trajs {
        *counts.entry(space.combined(t.condition)).or_default() += 1;
    }
    let mut s = format!("{} trajectories\n", trajs.len());
    for c in 0..space.combined_count() {
        let code = space.from_combined(c).expect("in range");
        s.push_str(&format!(
            "  weather {} daypart {}: {}\n",
            code.weather,
            code.daypart,
            counts.get(&c).copied().unwrap_or(0)
        ));
    }
    s
}

fn condition_names(space: ConditionSpace) -> Vec<String> {
    (0..space.combined_count())
        .map(|c| {
            let code = space.from_combined(c).expect("in range");
            format!("w{}d{}", code.weather, code.daypart)
        })
        .collect()
}

fn named(prepared: &Prepared, space: ConditionSpace, merged: bool) -> NamedTable {
    if merged {
        NamedTable {
            classes: (0..prepared.model.k()).map(|k| format!("cluster{k}")).collect(),
            conditions: condition_names(space),
            centroids: Some(prepared.model.centroids()),
            table: prepared.table.clone(),
        }
    } else {
        NamedTable {
            classes: (0..prepared.clustering.fitted_centroids.len()).map(|k| format!("orig{k}")).collect(),
            conditions: condition_names(space),
            centroids: Some(prepared.clustering.fitted_centroids.clone()),
            table: prepared.pre_merge.clone(),
        }
    }
}

fn print_wt(t: &wttf_core::stats::ChiSquareResult, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(t).expect("serializes"));
    } else {
        println!(
            "chi2 = {:.4}\ndof = {}\nlog10 p = {:.4}\nsignificant at 0.05: {}",
            t.chi2,
            t.dof,
            t.log10_p,
            if t.significant { "yes" } else { "no" }
        );
    }
}

fn cmd_cluster_table(path: &Path, out: Option<&Path>) -> Result<()> {
    let t = table::read_table(path)?;
    println!("{}", table::render(&t));
    if t.table.min_expected().2 >= wttf_core::stats::MIN_EXPECTED {
        println!("no merge needed");
        if let Some(o) = out {
            table::write_table(&t, o)?;
        }
        return Ok(());
    }
    if t.centroids.is_none() {
        println!("undersampled; add `x` and `y` centroid columns to merge by centroid linkage");
        return Ok(());
    }
    let m = table::merge(&t)?;
    for e in &m.events {
        println!(
            "merged {} into {} (min expected {:.2})",
            t.classes[e.from], t.classes[e.into], e.min_expected
        );
    }
    println!("merge_map = {:?}\n", m.merge_map);
    println!("{}", table::render(&m.merged));
    if let Some(o) = out {
        table::write_table(&m.merged, o)?;
    }
    Ok(())
}

fn cmd_cluster_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let prepared = prepare(cfg, load_trajectories(cfg)?)?;
    let space = cfg.dataset.space();
    let c = &prepared.clustering;
    println!("k-means converged after {} iterations", c.iterations);
    let pre = named(&prepared, space, false);
    println!("{}", table::render(&pre));
    for e in &c.merges {
        println!("merged orig{} into orig{} (min expected {:.2})", e.from, e.into, e.min_expected);
    }
    println!("merge_map = {:?}\n", c.merge_map);
    let post = named(&prepared, space, true);
    println!("{}", table::render(&post));
    write_file(&dir.join("cluster_model.json"), prepared.model.to_json().as_bytes())?;
    table::write_table(&pre, &dir.join("contingency_pre_merge.csv"))?;
    table::write_table(&post, &dir.join("contingency.csv"))?;
    let mut labels = String::from("ped_id,label,weather,daypart\n");
    for it in &prepared.dataset.items {
        labels.push_str(&format!(
            "{},{},{},{}\n",
            it.traj.ped_id, it.label, it.traj.condition.weather, it.traj.condition.daypart
        ));
    }
    write_file(&dir.join("labels.csv"), labels.as_bytes())?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_run(mut cfg: RunConfig, ablation: bool, dir: &Path) -> Result<()> {
    cfg.ablation = ablation;
    let out = run_pipeline(&cfg)?;
    let marker = dir.join("INCOMPLETE");
    if let Err(e) = write_outputs(&out, dir) {
        let _ = write_file(&marker, format!("{e}\n").as_bytes());
        return Err(e);
    }
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let r = &out.report;
    print_wt(&r.wt_test, false);
    if let Some(cv) = &r.cv {
        println!("mean test accuracy {:.4}, kappa {:.4}", cv.mean_test_acc, cv.mean_test_kappa);
    }
    if let Some(ab) = &r.ablation {
        let (a, b) = (&ab.paired.pooled_a, &ab.paired.pooled_b);
        println!("without WT: acc {:.4} ADE {:.3} FDE {:.3}", a.acc, a.ade, a.fde);
        println!("with WT:    acc {:.4} ADE {:.3} FDE {:.3}", b.acc, b.ade, b.fde);
        println!(
            "McNemar log10 p = {:.3}; influenced {} of {}",
            ab.significance.mcnemar.log10_p, ab.significance.influenced.count, ab.significance.n
        );
    }
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn read_report(run: &Path) -> Result<RunReport> {
    let p = run.join("report.json");
    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    RunReport::from_json(&s)
}

fn cmd_eval(run: &Path, rotation: usize, classifier: Option<&str>, data: Option<&Path>) -> Result<()> {
    let report = read_report(run)?;
    let cfg = &report.config;
    let p = run.join("cluster_model.json");
    let model = ClusterModel::from_json(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    let rd = run.join(format!("rotation{rotation}"));
    let name = match classifier {
        Some(n) => n.to_string(),
        None if rd.join("classifier_b.ckpt").exists() => "classifier_b".into(),
        None => "classifier".into(),
    };
    let clf = load_classifier(&rd.join(format!("{name}.ckpt")))?;
    let datp_path = rd.join("datp.ckpt");
    if !datp_path.exists() {
        return Err(Error::InvalidInput(format!(
            "{} has no trajectory predictors; evaluate an ablation run",
            rd.display()
        )));
    }
    let datp = load_datp(&datp_path)?;
    let trajs = match data {
        Some(d) => ingest_csv(d, &ColumnMap::canonical(), 1.0, cfg.dataset.space())?,
        None => load_trajectories(cfg)?,
    };
    let labeled = label_with_model(cfg, &model, trajs)?;
    let ex = ExampleSet::from_labeled(&labeled, cfg.dataset.obs_len)?;
    let m = evaluate(&clf, &datp, &ex)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintConfig { config } => {
            print!("{}", load_config(config.as_deref())?.to_toml_string());
        }
        Command::PrintSchema { kind } => match kind {
            SchemaKind::Config => println!("{}", RunConfig::json_schema()),
            SchemaKind::Report => println!("{}", RunReport::json_schema()),
        },
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let trajs = generate_synthetic(&cfg.scenario)?;
            write_csv_file(&out, &trajs)?;
            print!("{}", condition_summary(&trajs, cfg.scenario.space()));
        }
        Command::Ingest {
            input,
            format,
            config,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let paths = input.iter().map(|p| p.display().to_string()).collect();
            cfg.source = match format {
                Format::Canonical => DataSource::Canonical { paths },
                Format::Atc => DataSource::Atc { paths },
            };
            cfg.dataset.validate()?;
            let trajs = load_trajectories(&cfg)?;
            write_csv_file(&out, &trajs)?;
            print!("{}", condition_summary(&trajs, cfg.dataset.space()));
        }
        Command::Cluster {
            config,
            table,
            out,
            out_dir: od,
        } => match table {
            Some(t) => cmd_cluster_table(&t, out.as_deref())?,
            None => {
                let cfg = load_config(config.as_deref())?;
                cmd_cluster_config(&cfg, &out_dir(&od, &cfg))?;
            }
        },
        Command::WtTest { config, table, json } => {
            let result = match table {
                Some(t) => chi_square_test(&table::read_table(&t)?.table)?,
                None => {
                    let cfg = load_config(config.as_deref())?;
                    prepare(&cfg, load_trajectories(&cfg)?)?.wt_test
                }
            };
            print_wt(&result, json);
        }
        Command::Train { config, out_dir: od } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(&od, &cfg);
            cmd_run(cfg, false, &dir)?;
        }
        Command::Ablate { config, out_dir: od } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(&od, &cfg);
            cmd_run(cfg, true, &dir)?;
        }
        Command::Eval {
            run,
            rotation,
            classifier,
            data,
        } => cmd_eval(&run, rotation, classifier.as_deref(), data.as_deref())?,
        Command::Report { run, out } => {
            let r = read_report(&run)?;
            let dir = out.unwrap_or(run);
            for f in report::render_all(&r, &dir)? {
                println!("wrote {}", dir.join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Compute => 4,
            })
        }
    }
}
