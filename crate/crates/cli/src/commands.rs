use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crossia::config::{DeblurKind, RunConfig};
use crossia::db::ObjectImageDatabase;
use crossia::eval::{
    export_latent_projection, few_shot_ablation, latent_csv, latent_points, latent_svg, run_benchmark, write_reports,
    BundleSource, Condition,
};
use crossia::map::VoxelSemanticMap;
use crossia::model::EncoderBundle;
use crossia::pipeline::{collect_run, generate_world, labelled_queries, Query, SyntheticWorld};
use crossia::retrieval::{locate as locate_instance, DbEmbeddings};
use crossia::train::{init_bundle, train_from, Checkpoint};
use crossia::{Error, Result};

/// Paths inside one run directory.
struct Layout {
    root: PathBuf,
    train_key: String,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.run_dir(),
            train_key: cfg.training.fingerprint(),
        }
    }
    fn world(&self) -> PathBuf {
        self.root.join("world")
    }
    fn map(&self) -> PathBuf {
        self.root.join("map.json")
    }
    fn db(&self) -> PathBuf {
        self.root.join("db")
    }
    fn labels(&self) -> PathBuf {
        self.root.join("labels.json")
    }
    fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints").join(&self.train_key)
    }
    fn checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("checkpoint.json")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports").join(&self.train_key)
    }
    fn latent(&self) -> PathBuf {
        self.root.join("latent").join(&self.train_key)
    }
    fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Records the resolved configuration in the run directory.
fn stamp(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    create_dir(&layout.root)?;
    write(&layout.root.join("config.toml"), &cfg.to_toml())
}

fn load_db(layout: &Layout) -> Result<ObjectImageDatabase> {
    ObjectImageDatabase::load(&require(layout.db())?)
}

fn load_queries(layout: &Layout) -> Result<Vec<Query>> {
    let world = SyntheticWorld::load(&require(layout.world())?)?;
    let path = require(layout.labels())?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
    let gt_to_map: BTreeMap<u32, u32> = serde_json::from_str(&text)?;
    Ok(labelled_queries(&world, &gt_to_map))
}

fn load_bundle(layout: &Layout) -> Result<EncoderBundle> {
    Ok(Checkpoint::load(&require(layout.checkpoint())?)?.bundle)
}

pub fn gen_world(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    stamp(cfg, &layout)?;
    let world = generate_world(cfg.seed, &cfg.world)?;
    world.save(&layout.world())?;
    log::info!("world written to {}", layout.world().display());
    Ok(())
}

pub fn collect(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let world = SyntheticWorld::load(&require(layout.world())?)?;
    stamp(cfg, &layout)?;
    let run = collect_run(&world, &cfg.segmenter(), &cfg.deblurrer(), &cfg.mapping, &cfg.database)?;
    run.mapping.map.save(&layout.map())?;
    run.db.save(&layout.db())?;
    write(&layout.labels(), &serde_json::to_string_pretty(&run.gt_to_map)?)?;
    log::info!(
        "map with {} instances, database with {} crops",
        run.mapping.map.instance_ids().len(),
        run.db.crops().count()
    );
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let db = load_db(&layout)?;
    stamp(cfg, &layout)?;
    let dir = layout.checkpoint_dir();
    create_dir(&dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let log_path = dir.join("training_log.csv");
    let mut sink = std::fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    use std::io::Write;
    writeln!(sink, "{}", crossia::train::TrainingLog::HEADER).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let (bundle, _) = train_from(init_bundle(&db, &cfg.training)?, &db, &cfg.training, Some(&mut sink))?;
    Checkpoint::new(bundle, &cfg.training.fingerprint(), &db.digest()).save(&layout.checkpoint())?;
    log::info!("checkpoint written to {}", layout.checkpoint().display());
    Ok(())
}

/// Deblurring used by the "+ Deblur" conditions.
fn condition_deblur(cfg: &RunConfig) -> crossia::adapters::Deblurrer {
    match cfg.adapters.deblurrer {
        DeblurKind::Identity => cfg.deblurrer_of(DeblurKind::Unsharp),
        other => cfg.deblurrer_of(other),
    }
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let db = load_db(&layout)?;
    let queries = load_queries(&layout)?;
    let checkpoint = require(layout.checkpoint())?;
    stamp(cfg, &layout)?;
    let baseline = init_bundle(&db, &cfg.training)?;
    let mut conditions = vec![
        Condition {
            label: "Baseline".into(),
            source: BundleSource::Bundle(Box::new(baseline.clone())),
            deblur: false,
        },
        Condition {
            label: "CrossIA".into(),
            source: BundleSource::Checkpoint(checkpoint.clone()),
            deblur: false,
        },
    ];
    if cfg.evaluation.deblur_conditions {
        conditions.push(Condition {
            label: "Baseline + Deblur".into(),
            source: BundleSource::Bundle(Box::new(baseline)),
            deblur: true,
        });
        conditions.push(Condition {
            label: "CrossIA + Deblur".into(),
            source: BundleSource::Checkpoint(checkpoint),
            deblur: true,
        });
    }
    let reports = run_benchmark(&conditions, &queries, &db, &condition_deblur(cfg), cfg.retrieval.aggregation);
    write_reports(&reports, &layout.reports(), "benchmark", false)?;
    for r in &reports {
        println!("{}", r.table_row());
    }
    if reports.iter().all(|r| r.failure.is_some()) {
        return Err(Error::Backend("every condition failed".into()));
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let db = load_db(&layout)?;
    let queries = load_queries(&layout)?;
    stamp(cfg, &layout)?;
    let reports = few_shot_ablation(&db, &cfg.evaluation.shots_list, &cfg.training, &queries)?;
    write_reports(&reports, &layout.reports(), "ablation", true)?;
    for r in &reports {
        println!("{}", r.ablation_row());
    }
    Ok(())
}

pub fn locate(cfg: &RunConfig, query: &Path) -> Result<()> {
    let layout = Layout::new(cfg);
    let bundle = load_bundle(&layout)?;
    let db = load_db(&layout)?;
    let map = VoxelSemanticMap::load(&require(layout.map())?)?;
    let image = image::open(require(query.to_path_buf())?)
        .map_err(Error::from)?
        .into_rgb8();
    create_dir(&layout.cache())?;
    let cache = layout.cache().join(format!("embeddings-{}.json", bundle.fingerprint()));
    let emb = DbEmbeddings::load_or_build(&cache, &bundle, &db, &crossia::adapters::Deblurrer::Identity)?;
    let result = locate_instance(&image, &bundle, &emb, &map, &cfg.retrieval.nav, cfg.retrieval.aggregation)?;
    let record = serde_json::json!({
        "query": query.display().to_string(),
        "instance_id": result.goal.instance_id,
        "goal": result.goal,
        "ranking": result.ranking.ranking,
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

pub fn export_latent(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let db = load_db(&layout)?;
    let trained = load_bundle(&layout)?;
    let dir = layout.latent();
    create_dir(&dir)?;
    for (name, bundle) in [("baseline", init_bundle(&db, &cfg.training)?), ("crossia", trained)] {
        let projected = export_latent_projection(&latent_points(&bundle, &db)?)?;
        write(&dir.join(format!("{name}.csv")), &latent_csv(&projected))?;
        write(&dir.join(format!("{name}.svg")), &latent_svg(&projected))?;
    }
    log::info!("latent projections written to {}", dir.display());
    Ok(())
}
