//! Pipeline stages behind the command-line interface: dataset generation,
//! diffusion training, outlier generation, detector training, evaluation,
//! and parameter sweeps. Every artifact is written atomically and stamped
//! with lineage digests; consumers verify those stamps before mixing
//! artifacts.

use std::path::{Path, PathBuf};
use std::time::Duration;

use sona_core::data::{
    generate_benchmark, render_image, Archive, Background, BenchmarkSplits, ShapeClass,
};
use sona_core::data::archive::write_atomic;
use sona_core::detector::{train_detector, DetectorConfig, DetectorModel, LossTier};
use sona_core::diffusion::{train_diffusion, Denoiser, Vocabulary};
use sona_core::eval::{run_report, EvalReport, ReportContext, ReportFiles};
use sona_core::guidance::{
    generate_outlier_set, GuidanceKind, OutlierRequest, OutlierSet, TildeTPolicy,
};
use sona_core::{Error, Result, SeededRng, Tensor};

use crate::config::{parse_tilde_t, tilde_t_name, PipelineConfig, PromptPolicy};

/// A configured pipeline bound to a working directory. Sweeps create
/// variants whose downstream artifacts live in a sub-directory (`dir`)
/// while the shared dataset and diffusion checkpoint stay in `root`.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    root: PathBuf,
    dir: PathBuf,
}

fn file_tag(kind: Option<GuidanceKind>, policy: Option<TildeTPolicy>, stream: u64) -> String {
    let mut tag = String::new();
    if let Some(k) = kind {
        tag.push('_');
        tag.push_str(k.name());
    }
    if let Some(TildeTPolicy::Fixed(t)) = policy {
        tag.push_str(&format!("_t{t}"));
    }
    if stream > 0 {
        tag.push_str(&format!("_seed{stream}"));
    }
    tag
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, workdir: impl Into<PathBuf>) -> Result<Pipeline> {
        cfg.validate()?;
        let root: PathBuf = workdir.into();
        Ok(Pipeline {
            cfg,
            dir: root.clone(),
            root,
        })
    }

    /// A sweep variant: same shared upstream directory, altered config,
    /// downstream artifacts under `subdir`.
    fn variant(&self, cfg: PipelineConfig, subdir: &Path) -> Result<Pipeline> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            root: self.root.clone(),
            dir: subdir.to_path_buf(),
        })
    }

    pub fn workdir(&self) -> &Path {
        &self.dir
    }

    // ── Artifact paths ──────────────────────────────────────────────────

    pub fn data_path(&self) -> PathBuf {
        self.root.join("data.sona")
    }

    pub fn diffusion_path(&self) -> PathBuf {
        self.root.join("diffusion.sona")
    }

    pub fn probe_path(&self) -> PathBuf {
        self.root.join("probe.sona")
    }

    pub fn outliers_path(&self, kind: GuidanceKind, policy: TildeTPolicy, stream: u64) -> PathBuf {
        self.dir
            .join(format!("outliers{}.sona", file_tag(Some(kind), Some(policy), stream)))
    }

    pub fn detector_path(&self, tier: LossTier, kind: GuidanceKind, stream: u64) -> PathBuf {
        let kind_tag = (tier != LossTier::Ce).then_some(kind);
        self.dir.join(format!(
            "detector_{}{}.sona",
            tier.name().replace('+', "-"),
            file_tag(kind_tag, None, stream)
        ))
    }

    pub fn eval_dir(&self, tier: LossTier, kind: GuidanceKind, stream: u64) -> PathBuf {
        let kind_tag = (tier != LossTier::Ce).then_some(kind);
        self.dir.join(format!(
            "eval_{}{}",
            tier.name().replace('+', "-"),
            file_tag(kind_tag, None, stream)
        ))
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.log")
    }

    /// Append one line describing a completed command to the run log.
    pub fn append_manifest(&self, command: &str, duration: Duration) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let line = format!(
            "{}\tconfig={}\tseed={}\t{}ms\n",
            command,
            self.cfg.config_hash(),
            self.cfg.seed,
            duration.as_millis()
        );
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.manifest_path())
            .map_err(|e| Error::io(self.manifest_path(), e))?;
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(self.manifest_path(), e))
    }

    // ── Artifact I/O with lineage stamps ────────────────────────────────

    fn save_stamped(&self, mut archive: Archive, lineage: &str, path: &Path) -> Result<()> {
        archive.put_text("lineage", lineage)?;
        archive.put_text("config_hash", self.cfg.config_hash())?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        archive.save(path)
    }

    fn load_stamped(
        &self,
        path: &Path,
        expected_lineage: &str,
        producer: &str,
        force: bool,
    ) -> Result<Archive> {
        if !path.exists() {
            return Err(Error::config(format!(
                "missing artifact `{}` — run `sona {producer}` first",
                path.display()
            )));
        }
        let archive = Archive::load(path)?;
        let found = archive.text("lineage").unwrap_or("<unstamped>").to_string();
        if found != expected_lineage && !force {
            return Err(Error::config(format!(
                "artifact `{}` was produced under a different configuration \
                 (stamp {found}, expected {expected_lineage}); regenerate it with \
                 `sona {producer}` or pass --force to evaluation",
                path.display()
            )));
        }
        Ok(archive)
    }

    fn load_splits(&self, force: bool) -> Result<BenchmarkSplits> {
        let a = self.load_stamped(&self.data_path(), &self.cfg.data_hash(), "gen-data", force)?;
        BenchmarkSplits::from_archive(&a)
    }

    fn load_denoiser(&self, force: bool) -> Result<Denoiser> {
        let a = self.load_stamped(
            &self.diffusion_path(),
            &self.cfg.diffusion_hash(),
            "train-diffusion",
            force,
        )?;
        Denoiser::from_archive(&a)
    }

    // ── Stages ──────────────────────────────────────────────────────────

    /// Render the benchmark splits and write the dataset archive.
    pub fn gen_data(&self) -> Result<PathBuf> {
        let splits = generate_benchmark(
            &self.cfg.factor_spec()?,
            &self.cfg.split_counts(),
            self.cfg.seed,
        )?;
        let path = self.data_path();
        self.save_stamped(splits.to_archive()?, &self.cfg.data_hash(), &path)?;
        Ok(path)
    }

    /// Train the conditional denoiser on ID + prompt-class images.
    pub fn train_diffusion(&self) -> Result<PathBuf> {
        let splits = self.load_splits(false)?;
        let sched = self.cfg.schedule()?;

        let mut labels: Vec<u32> = Vec::new();
        let mut images: Vec<Tensor> = Vec::new();
        for img in splits.id_train.iter().chain(&splits.prompt_train) {
            images.push(img.pixels.clone());
            labels.push(img.label);
        }
        let mut vocab_labels: Vec<u32> = splits.id_classes.iter().map(|c| c.id()).collect();
        vocab_labels.extend(splits.ood_prompt_labels.iter().map(|c| c.id()));
        let vocab = Vocabulary::new(vocab_labels)?;

        let mut rng = SeededRng::new(self.cfg.seed.wrapping_add(0x10));
        let mut den = Denoiser::init(self.cfg.denoiser_config(), vocab, &mut rng)?;
        let stats = train_diffusion(&mut den, &sched, &images, &labels, &self.cfg.diffusion_train())?;

        let path = self.diffusion_path();
        let meta = [
            ("steps", self.cfg.diffusion.steps.to_string()),
            ("final_loss", format!("{:.6}", stats.tail_mean(100))),
        ];
        self.save_stamped(den.to_archive(&meta)?, &self.cfg.diffusion_hash(), &path)?;
        Ok(path)
    }

    /// Build the per-outlier requests: sources cycle through the training
    /// set, targets follow the prompt policy.
    fn outlier_requests(
        &self,
        splits: &BenchmarkSplits,
        count: usize,
        gen_seed: u64,
    ) -> Result<Vec<OutlierRequest>> {
        let prompts = &splits.ood_prompt_labels;
        let policy = PromptPolicy::from_name(&self.cfg.outliers.prompt_policy)?;
        let by_distance = match policy {
            PromptPolicy::Rand => None,
            _ => Some(prompt_by_distance(
                &splits.id_classes,
                prompts,
                self.cfg.data.side,
                policy == PromptPolicy::Close,
            )),
        };
        let mut rng = SeededRng::new(gen_seed ^ 0x70D0_5EED);
        let n = splits.id_train.len();
        let mut requests = Vec::with_capacity(count);
        for i in 0..count {
            let source_index = i % n;
            let c_id = splits.id_train[source_index].label;
            let c_ood = match &by_distance {
                None => prompts[rng.below(prompts.len())].id(),
                Some(map) => map[&c_id].id(),
            };
            requests.push(OutlierRequest {
                source_index,
                c_id,
                c_ood,
            });
        }
        Ok(requests)
    }

    /// Generate an outlier archive with the given guidance kind. The
    /// noising policy defaults to the config file's; `stream` decorrelates
    /// repeated generations for multi-seed experiments.
    pub fn gen_outliers(
        &self,
        kind: GuidanceKind,
        policy_override: Option<TildeTPolicy>,
        stream: u64,
    ) -> Result<PathBuf> {
        let splits = self.load_splits(false)?;
        let den = self.load_denoiser(false)?;
        let sched = self.cfg.schedule()?;
        let policy = match policy_override {
            Some(p) => p,
            None => parse_tilde_t(&self.cfg.outliers.tilde_t)?,
        };
        let sona_cfg = self.cfg.sona_config_for(policy, stream);
        let count = if self.cfg.outliers.count == 0 {
            splits.id_train.len()
        } else {
            self.cfg.outliers.count
        };
        let requests = self.outlier_requests(&splits, count, sona_cfg.seed)?;
        let sources: Vec<Tensor> = splits.id_train.iter().map(|im| im.pixels.clone()).collect();
        let set = generate_outlier_set(&den, &sched, &sources, &requests, &sona_cfg, kind)?;

        let path = self.outliers_path(kind, policy, stream);
        let meta = [
            ("guidance", kind.name().to_string()),
            ("tilde_t", tilde_t_name(policy)),
            ("stream", stream.to_string()),
        ];
        self.save_stamped(
            set.to_archive(&meta)?,
            &self.cfg.outliers_hash(kind, policy, stream),
            &path,
        )?;
        Ok(path)
    }

    fn load_outliers(
        &self,
        kind: GuidanceKind,
        policy: TildeTPolicy,
        stream: u64,
        force: bool,
    ) -> Result<OutlierSet> {
        let producer = format!("gen-outliers --guidance {}", kind.name());
        let a = self.load_stamped(
            &self.outliers_path(kind, policy, stream),
            &self.cfg.outliers_hash(kind, policy, stream),
            &producer,
            force,
        )?;
        OutlierSet::from_archive(&a)
    }

    fn id_training_data(&self, splits: &BenchmarkSplits) -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut images = Vec::with_capacity(splits.id_train.len());
        let mut labels = Vec::with_capacity(splits.id_train.len());
        for img in &splits.id_train {
            images.push(img.pixels.clone());
            labels.push(splits.id_class_index(img.label)?);
        }
        Ok((images, labels))
    }

    /// Train a detector at the given loss tier. Tiers beyond plain
    /// cross-entropy consume the outlier archive of `kind` (config-default
    /// noising policy) for the same stream.
    pub fn train_detector(
        &self,
        tier: LossTier,
        kind: GuidanceKind,
        stream: u64,
    ) -> Result<PathBuf> {
        let splits = self.load_splits(false)?;
        let policy = parse_tilde_t(&self.cfg.outliers.tilde_t)?;
        let outliers = if tier == LossTier::Ce {
            None
        } else {
            Some(self.load_outliers(kind, policy, stream, false)?)
        };
        let (images, labels) = self.id_training_data(&splits)?;

        let train_cfg = self.cfg.detector_train(stream).tiered(tier);
        let mut rng = SeededRng::new(train_cfg.seed ^ 0x1217_AB1E);
        let mut model =
            DetectorModel::init(DetectorConfig::new(splits.num_id_classes()), &mut rng)?;
        train_detector(&mut model, &images, &labels, outliers.as_ref(), &train_cfg)?;

        let lineage = self.detector_lineage(tier, kind, policy, stream);
        let path = self.detector_path(tier, kind, stream);
        let meta = [
            ("tier", tier.name().to_string()),
            ("guidance", kind.name().to_string()),
            ("stream", stream.to_string()),
        ];
        self.save_stamped(model.to_archive(&meta)?, &lineage, &path)?;
        Ok(path)
    }

    fn detector_lineage(
        &self,
        tier: LossTier,
        kind: GuidanceKind,
        policy: TildeTPolicy,
        stream: u64,
    ) -> String {
        let upstream = (tier != LossTier::Ce).then(|| self.cfg.outliers_hash(kind, policy, stream));
        self.cfg
            .detector_hash(tier.name(), upstream.as_deref(), stream)
    }

    /// Load the cached probe classifier, or train and cache it. The probe
    /// is a plain classifier on ID data, independent of any detector under
    /// evaluation.
    pub fn ensure_probe(&self, splits: &BenchmarkSplits) -> Result<DetectorModel> {
        let path = self.probe_path();
        let lineage = self.cfg.probe_hash();
        if path.exists() {
            let a = Archive::load(&path)?;
            if a.text("lineage").unwrap_or("") == lineage {
                return DetectorModel::from_archive(&a);
            }
        }
        let (images, labels) = self.id_training_data(splits)?;
        let mut train_cfg = self.cfg.detector_train(0).tiered(LossTier::Ce);
        train_cfg.epochs = self.cfg.eval.probe_epochs;
        train_cfg.seed = self.cfg.seed.wrapping_add(0x30);
        let mut rng = SeededRng::new(train_cfg.seed ^ 0x0BE5_0BE5);
        let mut probe =
            DetectorModel::init(DetectorConfig::new(splits.num_id_classes()), &mut rng)?;
        train_detector(&mut probe, &images, &labels, None, &train_cfg)?;
        self.save_stamped(probe.to_archive(&[])?, &lineage, &path)?;
        Ok(probe)
    }

    /// Evaluate a trained detector: metrics over the test splits plus
    /// outlier-quality metrics for every same-stream outlier archive
    /// found in the working directory.
    pub fn eval(
        &self,
        tier: LossTier,
        kind: GuidanceKind,
        stream: u64,
        force: bool,
    ) -> Result<(EvalReport, ReportFiles)> {
        let splits = self.load_splits(force)?;
        let policy = parse_tilde_t(&self.cfg.outliers.tilde_t)?;
        let detector_archive = self.load_stamped(
            &self.detector_path(tier, kind, stream),
            &self.detector_lineage(tier, kind, policy, stream),
            &format!("train-detector --loss {}", tier.name()),
            force,
        )?;
        let model = DetectorModel::from_archive(&detector_archive)?;

        let mut sets: Vec<(GuidanceKind, OutlierSet)> = Vec::new();
        for k in [GuidanceKind::Sona, GuidanceKind::Global, GuidanceKind::GlobalDiff] {
            if self.outliers_path(k, policy, stream).exists() {
                sets.push((k, self.load_outliers(k, policy, stream, force)?));
            }
        }
        let probe = self.ensure_probe(&splits)?;

        let out_dir = self.eval_dir(tier, kind, stream);
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let ctx = ReportContext {
            model: &model,
            splits: &splits,
            outlier_sets: sets.iter().map(|(k, s)| (k.name(), s)).collect(),
            probe: Some(&probe),
            seed: self.cfg.seed.wrapping_add(stream),
            config_hash: &self.cfg.config_hash(),
        };
        let (report, mut files) = run_report(&ctx, &out_dir)?;
        if !self.cfg.eval.grid {
            if let Some(png) = files.grid_png.take() {
                std::fs::remove_file(&png).map_err(|e| Error::io(&png, e))?;
            }
        }
        Ok((report, files))
    }

    /// The whole pipeline at the config's defaults: dataset, diffusion,
    /// one outlier set, one detector, one report.
    pub fn run_all(
        &self,
        tier: LossTier,
        kind: GuidanceKind,
    ) -> Result<(EvalReport, ReportFiles)> {
        self.gen_data()?;
        self.train_diffusion()?;
        self.gen_outliers(kind, None, 0)?;
        self.train_detector(tier, kind, 0)?;
        self.eval(tier, kind, 0, false)
    }

    // ── Sweeps ──────────────────────────────────────────────────────────

    /// Run one full downstream variant per value of the swept parameter,
    /// reusing the shared dataset and diffusion checkpoint, and
    /// consolidate every variant's report into one CSV.
    pub fn ablate(&self, sweep: SweepKind, values: &[String]) -> Result<PathBuf> {
        if values.is_empty() {
            return Err(Error::config("sweep needs at least one value"));
        }
        // Validate every value before any work starts.
        let variants: Vec<(String, PipelineConfig, Option<TildeTPolicy>)> = values
            .iter()
            .map(|v| self.sweep_variant(sweep, v))
            .collect::<Result<_>>()?;

        // Upstream artifacts must exist once, shared by all variants.
        self.load_splits(false)?;
        self.load_denoiser(false)?;

        let mut rows = String::from("sweep,param,section,metric,split,value,seed,config_hash\n");
        for (tag, cfg, policy) in &variants {
            let subdir = self
                .dir
                .join(format!("sweep_{}", sweep.name()))
                .join(tag.replace([':', '.'], "p"));
            let variant = self.variant(cfg.clone(), &subdir)?;
            variant.gen_outliers(GuidanceKind::Sona, *policy, 0)?;
            variant.train_detector(LossTier::Full, GuidanceKind::Sona, 0)?;
            let (report, _) = variant.eval(LossTier::Full, GuidanceKind::Sona, 0, false)?;
            for row in &report.rows {
                rows.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    sweep.name(),
                    tag,
                    row.section,
                    row.metric,
                    row.split,
                    row.value,
                    row.seed,
                    row.config_hash
                ));
            }
        }
        let out = self.dir.join(format!("sweep_{}.csv", sweep.name()));
        write_atomic(&out, rows.as_bytes())?;
        Ok(out)
    }

    fn sweep_variant(
        &self,
        sweep: SweepKind,
        value: &str,
    ) -> Result<(String, PipelineConfig, Option<TildeTPolicy>)> {
        let mut cfg = self.cfg.clone();
        let mut policy = None;
        match sweep {
            SweepKind::Lambda => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad mask fraction `{value}`")))?;
                cfg.outliers.lambda = v;
            }
            SweepKind::S => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad guidance scale `{value}`")))?;
                cfg.outliers.s = v;
            }
            SweepKind::TildeT => {
                let v: usize = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad noising step `{value}`")))?;
                cfg.outliers.tilde_t = format!("fixed:{v}");
                policy = Some(TildeTPolicy::Fixed(v));
            }
        }
        cfg.validate()?;
        Ok((value.to_string(), cfg, policy))
    }
}

/// Which generation parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Lambda,
    S,
    TildeT,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Lambda => "lambda",
            SweepKind::S => "s",
            SweepKind::TildeT => "tilde_t",
        }
    }

    pub fn from_name(name: &str) -> Result<SweepKind> {
        match name {
            "lambda" => Ok(SweepKind::Lambda),
            "s" => Ok(SweepKind::S),
            "tilde_t" => Ok(SweepKind::TildeT),
            other => Err(Error::config(format!(
                "unknown sweep `{other}` (expected lambda, s, or tilde_t)"
            ))),
        }
    }
}

/// For each ID class, the prompt class whose canonical shape is nearest
/// (or farthest) by mask-overlap distance.
fn prompt_by_distance(
    id_classes: &[ShapeClass],
    prompts: &[ShapeClass],
    side: usize,
    closest: bool,
) -> std::collections::HashMap<u32, ShapeClass> {
    let canonical_mask = |class: ShapeClass| -> Tensor {
        let bg = Background::Noise {
            base: [0.0; 3],
            amp: 0.0,
            seed: 0,
        };
        let half = side as f32 / 2.0;
        let radius = 0.31 * side as f32;
        render_image(side, class, &bg, [1.0; 3], (half, half), radius).1
    };
    let distance = |a: &Tensor, b: &Tensor| -> f64 {
        let mut inter = 0.0f64;
        let mut union = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > 0.5 && *y > 0.5 {
                inter += 1.0;
            }
            if *x > 0.5 || *y > 0.5 {
                union += 1.0;
            }
        }
        1.0 - inter / union.max(1.0)
    };
    let prompt_masks: Vec<(ShapeClass, Tensor)> =
        prompts.iter().map(|&p| (p, canonical_mask(p))).collect();
    let mut map = std::collections::HashMap::new();
    for &c in id_classes {
        let mask = canonical_mask(c);
        let mut best = (prompt_masks[0].0, distance(&mask, &prompt_masks[0].1));
        for (p, pm) in &prompt_masks[1..] {
            let d = distance(&mask, pm);
            if (closest && d < best.1) || (!closest && d > best.1) {
                best = (*p, d);
            }
        }
        map.insert(c.id(), best.0);
    }
    map
}
