//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use grounded_audit::grounding::{ground_dataset, HeatmapSource};
use grounded_audit::io::{ensure_dir, write_image_png, Dataset, HeatmapStore};
use grounded_audit::keywords::{rank_keywords, KeywordConfig, KeywordReport, KeywordRequest};
use grounded_audit::metrics::GroupedMetrics;
use grounded_audit::mitigation::{
    erm_fit, evaluate_classifier, ground_truth_train_groups, groupdro_fit, infer_groups_zero_shot, jtt_fit,
    zero_shot_eval, GroupInference, PromptStrategy, PromptTemplates, Selection, TrainOutcome, DEFAULT_ETA,
    DEFAULT_LAMBDA_UP,
};
use grounded_audit::model::{argmax, CamMethod, GroundingConfig, Split};
use grounded_audit::overlap::{overlap_audit, OverlapReport, SegmentationMasks};
use grounded_audit::providers::{
    Classifier, EmbeddingZeroShot, FeatureRecipe, PooledLogisticClassifier, SyntheticEmbedder, TrainerConfig,
};
use grounded_audit::report::{
    emit_report, AblationPoint, AuditReport, KeywordRow, MetricRow, OverlapRow, Provenance, SliceRow,
};
use grounded_audit::slicing::{
    default_num_slices, discover_slices, DiscoveryRequest, DiscoveryResult, MixtureConfig, SlicingMethod,
};
use grounded_audit::synthdata::{
    generate_spurious_dataset, plant_heatmaps, synthetic_embedder, CaptionMode, Region, SynthConfig,
    SyntheticCaptioner, CORE_MASK, DEFAULT_SHARPNESS, SPURIOUS_MASK,
};

use crate::settings::Settings;

const SYNTH_FILE: &str = "synth.json";
const MODEL_FILE: &str = "model.gamd";
const HEATMAP_FILE: &str = "heatmaps.gahm";

pub fn run(command: &str, s: &Settings) -> Result<()> {
    let ctx = Ctx { command, s };
    match command {
        "synth" => ctx.synth(),
        "train" => ctx.train(),
        "ground" => ctx.ground(),
        "audit-overlap" => ctx.audit_overlap(),
        "discover" => ctx.discover(),
        "keywords" => ctx.keywords(),
        "mitigate" => ctx.mitigate(),
        "evaluate" => ctx.evaluate(),
        "report" => ctx.report(),
        "ablate-tau" => ctx.ablate_tau(),
        other => bail!("unknown command `{other}`"),
    }
}

/// FNV-1a digest of a file, recorded in provenance. Stage artifacts are
/// hashed without their volatile block so that reruns hash alike.
fn digest(path: &Path) -> Result<String> {
    let mut bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        if let Ok(mut v) = serde_json::from_slice::<Value>(&bytes) {
            if let Some(Value::Object(p)) = v.get_mut("provenance") {
                if p.remove("volatile").is_some() {
                    bytes = serde_json::to_vec(&v)?;
                }
            }
        }
    }
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("fnv1a64:{h:016x}"))
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    provenance: &'a Provenance,
    result: &'a T,
}

fn read_result<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let result = v
        .get_mut("result")
        .map(Value::take)
        .ok_or_else(|| anyhow!("{} is not a stage artifact (no `result`)", path.display()))?;
    serde_json::from_value(result).with_context(|| format!("reading the result of {}", path.display()))
}

/// Shared provider handles for one stage.
struct Providers {
    dataset: Dataset,
    synth: Option<SynthConfig>,
    recipe: FeatureRecipe,
}

impl Providers {
    fn embedder(&self) -> Result<SyntheticEmbedder> {
        Ok(match &self.synth {
            Some(cfg) => synthetic_embedder(cfg, self.recipe)?,
            None => SyntheticEmbedder::new(self.recipe, 3, SyntheticEmbedder::DEFAULT_OFFSET),
        })
    }

    fn captioner(&self) -> Result<SyntheticCaptioner> {
        let cfg = self
            .synth
            .clone()
            .ok_or_else(|| anyhow!("captioning needs the {SYNTH_FILE} written next to the manifest by `synth`"))?;
        Ok(SyntheticCaptioner::new(cfg, CaptionMode::Salient))
    }

    fn zero_shot(&self) -> Result<EmbeddingZeroShot<SyntheticEmbedder>> {
        Ok(EmbeddingZeroShot::new(
            self.embedder()?,
            EmbeddingZeroShot::<SyntheticEmbedder>::DEFAULT_TEMPERATURE,
        ))
    }
}

/// Where heatmaps come from, resolved from `--heatmaps` / `--explainer`.
enum HeatmapChoice {
    Model,
    Store(HeatmapStore),
}

struct Ctx<'a> {
    command: &'a str,
    s: &'a Settings,
}

impl Ctx<'_> {
    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.s.require_path("out")?;
        ensure_dir(&out)?;
        Ok(out)
    }

    fn provenance(&self, extra: Value, inputs: &[(&str, &Path)]) -> Result<Provenance> {
        let mut config = serde_json::to_value(self.s.echo())?;
        if let (Value::Object(c), Value::Object(e)) = (&mut config, extra) {
            c.insert("resolved".into(), Value::Object(e));
        }
        let mut map = BTreeMap::new();
        for (role, path) in inputs {
            map.insert(role.to_string(), format!("{} {}", path.display(), digest(path)?));
        }
        Ok(Provenance::new(self.command, config, map))
    }

    fn emit<T: Serialize>(&self, path: &Path, provenance: &Provenance, result: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(&Artifact { provenance, result })? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn seed(&self) -> Result<u64> {
        self.s.get_or("seed", 0)
    }

    fn split(&self, default: Split) -> Result<Split> {
        Ok(self.s.get::<Split>("split")?.unwrap_or(default))
    }

    fn trainer(&self) -> Result<TrainerConfig> {
        let d = TrainerConfig::default();
        Ok(TrainerConfig {
            learning_rate: self.s.get_or("learning_rate", d.learning_rate)?,
            steps: self.s.get_or("steps", d.steps)?,
            weight_decay: self.s.get_or("weight_decay", d.weight_decay)?,
            seed: self.seed()?,
            ..d
        })
    }

    fn tau(&self) -> Result<f64> {
        self.s.get_or("tau", GroundingConfig::DEFAULT_TAU)
    }

    fn grounding(&self) -> Result<GroundingConfig> {
        let cam = self.s.get_or("cam_method", CamMethod::GradCam)?;
        Ok(GroundingConfig::new(self.tau()?, cam, self.s.switch("grounding", true)?)?)
    }

    fn manifest_path(&self) -> Result<PathBuf> {
        self.s.require_path("manifest")
    }

    fn providers(&self) -> Result<Providers> {
        let manifest = self.manifest_path()?;
        let dataset = Dataset::load(&manifest)?;
        let synth_path = dataset.manifest.root.join(SYNTH_FILE);
        let synth = if synth_path.exists() {
            Some(read_result::<SynthConfig>(&synth_path)?)
        } else {
            log::warn!("no {SYNTH_FILE} next to the manifest; the embedder has an empty vocabulary");
            None
        };
        Ok(Providers {
            dataset,
            synth,
            recipe: FeatureRecipe::default(),
        })
    }

    fn classifier(&self) -> Result<(PooledLogisticClassifier, PathBuf)> {
        let path = self.s.require_path("model")?;
        Ok((PooledLogisticClassifier::load(&path)?, path))
    }

    fn masks(&self, dataset: &Dataset) -> Result<SegmentationMasks> {
        let root = self
            .s
            .path("masks")
            .unwrap_or_else(|| dataset.manifest.root.join("masks"));
        let ids: Vec<&str> = dataset.manifest.records.iter().map(|r| r.id.as_str()).collect();
        Ok(SegmentationMasks::load(&root, CORE_MASK, SPURIOUS_MASK, &ids)?)
    }

    fn heatmap_choice(&self, dataset: &Dataset) -> Result<HeatmapChoice> {
        if let Some(path) = self.s.path("heatmaps") {
            return Ok(HeatmapChoice::Store(HeatmapStore::load(&path)?));
        }
        let explainer: String = self.s.get_or("explainer", "model".to_string())?;
        let region = match explainer.as_str() {
            "model" => return Ok(HeatmapChoice::Model),
            "planted-spurious" => Region::Spurious,
            "planted-core" => Region::Core,
            other => bail!("unknown explainer `{other}` (model | planted-spurious | planted-core)"),
        };
        let sharpness = self.s.get_or("sharpness", DEFAULT_SHARPNESS)?;
        let masks = self.masks(dataset)?;
        Ok(HeatmapChoice::Store(plant_heatmaps(&dataset.manifest, &masks, region, sharpness)?))
    }

    fn keyword_map(&self) -> Result<Option<(BTreeMap<String, Vec<String>>, bool)>> {
        match self.s.path("keywords") {
            None => Ok(None),
            Some(path) => {
                let report: KeywordReport = read_result(&path)?;
                Ok(Some((report.top_keywords(), report.provenance.grounding.enabled)))
            }
        }
    }

    // -- synth -------------------------------------------------------------

    fn synth(&self) -> Result<()> {
        let out = self.out_dir()?;
        let d = SynthConfig::default();
        let n_train = self.s.get_or("n", d.n_train)?;
        let image_size = self.s.get_or("image_size", d.image_size)?;
        let mut core_size = image_size / 2;
        if (image_size - core_size) % 2 != 0 {
            core_size += 1;
        }
        let cfg = SynthConfig {
            num_classes: self.s.get_or("classes", d.num_classes)?,
            n_train,
            n_val: n_train / 2,
            n_test: n_train / 2,
            rho: self.s.get_or("rho", d.rho)?,
            image_size,
            core_size,
            noise: self.s.get_or("noise", d.noise)?,
            seed: self.seed()?,
            ..d
        };
        let mut data = generate_spurious_dataset(&cfg)?;
        data.write(&out)?;
        let prov = self.provenance(serde_json::to_value(&cfg)?, &[])?;
        self.emit(&out.join(SYNTH_FILE), &prov, &cfg)
    }

    // -- train -------------------------------------------------------------

    fn train(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let trainer = self.trainer()?;
        let outcome = erm_fit(&trainer, p.recipe, &p.dataset, Selection::Final)?;
        let model_path = out.join(MODEL_FILE);
        outcome.classifier.save(&model_path)?;
        let result = training_summary(&outcome, &p.dataset, json!(null))?;
        let prov = self.provenance(
            json!({"trainer": trainer, "recipe": p.recipe}),
            &[("manifest", &self.manifest_path()?)],
        )?;
        self.emit(&out.join("train.json"), &prov, &result)
    }

    // -- ground ------------------------------------------------------------

    fn ground(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let ds = &p.dataset;
        let indices = match self.s.get::<Split>("split")? {
            Some(split) => ds.split_indices(split),
            None => (0..ds.images.len()).collect(),
        };
        let mut config = self.grounding()?;
        config.enabled = true;
        let choice = self.heatmap_choice(ds)?;
        let model = match choice {
            HeatmapChoice::Model => Some(self.classifier()?),
            HeatmapChoice::Store(_) => None,
        };
        let source = match (&choice, &model) {
            (HeatmapChoice::Store(store), _) => HeatmapSource::Store(store),
            (HeatmapChoice::Model, Some((clf, _))) => HeatmapSource::Classifier(clf),
            (HeatmapChoice::Model, None) => unreachable!("classifier loaded above"),
        };
        let ids = ds.ids_at(&indices);
        let output = ground_dataset(&ids, &ds.images_at(&indices), source, &config)?;
        output.heatmaps.save(&out.join(HEATMAP_FILE))?;
        let img_dir = out.join("grounded");
        ensure_dir(&img_dir)?;
        for (id, img) in ids.iter().zip(&output.images) {
            write_image_png(&img_dir.join(format!("{id}.png")), img)?;
        }
        let mut inputs = vec![("manifest", self.manifest_path()?)];
        if let Some((_, path)) = &model {
            inputs.push(("model", path.clone()));
        }
        let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
        let prov = self.provenance(json!({"grounding": config}), &inputs)?;
        let result = json!({
            "samples": ids.len(),
            "heatmaps": HEATMAP_FILE,
            "grounded_images": "grounded",
            "failures": output.failures,
            "grounding": output.provenance,
        });
        self.emit(&out.join("ground.json"), &prov, &result)
    }

    // -- audit-overlap -----------------------------------------------------

    fn audit_overlap(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let ds = &p.dataset;
        let tau = self.tau()?;
        let indices = ds.split_indices(self.split(Split::Test)?);
        let ids = ds.ids_at(&indices);
        let mut inputs = vec![("manifest", self.manifest_path()?)];
        let store = match self.heatmap_choice(ds)? {
            HeatmapChoice::Store(store) => store,
            HeatmapChoice::Model => {
                let (clf, path) = self.classifier()?;
                inputs.push(("model", path));
                let config = GroundingConfig::new(tau, self.s.get_or("cam_method", CamMethod::GradCam)?, true)?;
                ground_dataset(&ids, &ds.images_at(&indices), HeatmapSource::Classifier(&clf), &config)?.heatmaps
            }
        };
        let masks = self.masks(ds)?;
        let report = overlap_audit(&ds.manifest, &store, &masks, tau, Some(&ids))?;
        let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
        let prov = self.provenance(json!({"tau": tau}), &inputs)?;
        self.emit(&out.join("overlap.json"), &prov, &report)
    }

    // -- discover ----------------------------------------------------------

    fn discovery(&self, p: &Providers, clf: &PooledLogisticClassifier, choice: &HeatmapChoice, grounding: &GroundingConfig) -> Result<DiscoveryResult> {
        let ds = &p.dataset;
        let trainer = self.trainer()?;
        let method: String = self.s.get_or("method", "domino".to_string())?;
        let method = match method.as_str() {
            "domino" => SlicingMethod::Domino,
            "facts" => SlicingMethod::Facts {
                lambda_high: self
                    .s
                    .get_or("lambda_high", SlicingMethod::DEFAULT_AMPLIFICATION * trainer.weight_decay)?,
                trainer,
                recipe: p.recipe,
            },
            other => bail!("unknown slicing method `{other}` (domino | facts)"),
        };
        let k = match self.s.get::<usize>("k_slices")? {
            Some(k) => k,
            None => default_num_slices(&ds.manifest)
                .ok_or_else(|| anyhow!("no annotated groups; pass --k-slices"))?,
        };
        let mixture = MixtureConfig::new(k, self.seed()?).with_gammas(
            self.s.get_or("gamma_y", MixtureConfig::DEFAULT_GAMMA)?,
            self.s.get_or("gamma_yhat", MixtureConfig::DEFAULT_GAMMA)?,
        );
        let embedder = p.embedder()?;
        Ok(discover_slices(DiscoveryRequest {
            dataset: ds,
            split: self.split(Split::Val)?,
            classifier: clf,
            embedder: &embedder,
            grounding,
            heatmaps: match choice {
                HeatmapChoice::Store(s) => Some(s),
                HeatmapChoice::Model => None,
            },
            method,
            mixture,
            top_k: self.s.get_or("top_k", 10)?,
        })?)
    }

    fn discover(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let (clf, model_path) = self.classifier()?;
        let choice = self.heatmap_choice(&p.dataset)?;
        let grounding = self.grounding()?;
        let result = self.discovery(&p, &clf, &choice, &grounding)?;
        let prov = self.provenance(
            json!({"grounding": grounding}),
            &[("manifest", &self.manifest_path()?), ("model", &model_path)],
        )?;
        self.emit(&out.join("slices.json"), &prov, &result)
    }

    // -- keywords ----------------------------------------------------------

    fn keyword_report(&self, p: &Providers, clf: &PooledLogisticClassifier, choice: &HeatmapChoice, grounding: &GroundingConfig) -> Result<KeywordReport> {
        let ds = &p.dataset;
        let split = self.split(Split::Val)?;
        let indices = ds.split_indices(split);
        let predictions = indices
            .iter()
            .map(|&i| Ok(argmax(&clf.predict_proba(&ds.images[i])?)))
            .collect::<Result<Vec<_>>>()?;
        let captioner = p.captioner()?;
        let embedder = p.embedder()?;
        Ok(rank_keywords(KeywordRequest {
            dataset: ds,
            split,
            predictions: &predictions,
            captioner: &captioner,
            embedder: &embedder,
            grounding,
            heatmaps: match choice {
                HeatmapChoice::Store(s) => HeatmapSource::Store(s),
                HeatmapChoice::Model => HeatmapSource::Classifier(clf),
            },
            top_n: self.s.get_or("top_n", 5)?,
            config: KeywordConfig::default(),
            class: self.s.get("class")?,
        })?)
    }

    fn keywords(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let (clf, model_path) = self.classifier()?;
        let choice = self.heatmap_choice(&p.dataset)?;
        let grounding = self.grounding()?;
        let report = self.keyword_report(&p, &clf, &choice, &grounding)?;
        let prov = self.provenance(
            json!({"grounding": grounding}),
            &[("manifest", &self.manifest_path()?), ("model", &model_path)],
        )?;
        self.emit(&out.join("keywords.json"), &prov, &report)
    }

    // -- mitigate ----------------------------------------------------------

    fn train_groups(
        &self,
        p: &Providers,
        keywords: Option<&BTreeMap<String, Vec<String>>>,
    ) -> Result<(Vec<String>, Option<GroupInference>)> {
        let ds = &p.dataset;
        let mode: String = self.s.get_or("groups", "ground-truth".to_string())?;
        match mode.as_str() {
            "ground-truth" => Ok((ground_truth_train_groups(&ds.manifest)?, None)),
            "inferred" => {
                let keywords = keywords.ok_or_else(|| anyhow!("--groups inferred needs --keywords"))?;
                let zs = p.zero_shot()?;
                let idx = ds.split_indices(Split::Train);
                let inference = infer_groups_zero_shot(ds, &idx, keywords, &zs, &PromptTemplates::default())?;
                Ok((inference.groups.clone(), Some(inference)))
            }
            "file" => {
                let path = self.s.require_path("groups_file")?;
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let map: BTreeMap<String, String> =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let groups = ds
                    .ids_at(&ds.split_indices(Split::Train))
                    .into_iter()
                    .map(|id| {
                        map.get(id)
                            .cloned()
                            .ok_or_else(|| anyhow!("{} has no group for training sample `{id}`", path.display()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((groups, None))
            }
            other => bail!("unknown group source `{other}` (ground-truth | inferred | file)"),
        }
    }

    fn fit_method(&self, p: &Providers, method: &str, groups: &[String]) -> Result<TrainOutcome> {
        let trainer = self.trainer()?;
        let selection = Selection::BestValidation;
        Ok(match method {
            "erm" => erm_fit(&trainer, p.recipe, &p.dataset, selection)?,
            "jtt" => jtt_fit(
                &trainer,
                None,
                p.recipe,
                &p.dataset,
                self.s.get_or("lambda_up", DEFAULT_LAMBDA_UP)?,
                selection,
            )?,
            "groupdro" => groupdro_fit(
                &trainer,
                p.recipe,
                &p.dataset,
                groups,
                self.s.get_or("eta", DEFAULT_ETA)?,
                selection,
            )?,
            other => bail!("unknown mitigation method `{other}` (erm | jtt | groupdro)"),
        })
    }

    fn mitigate(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let method: String = self.s.get_or("method", "groupdro".to_string())?;
        let keywords = self.keyword_map()?;
        let (groups, inference) = if method == "groupdro" {
            self.train_groups(&p, keywords.as_ref().map(|(k, _)| k))?
        } else {
            (Vec::new(), None)
        };
        let outcome = self.fit_method(&p, &method, &groups)?;
        outcome.classifier.save(&out.join(MODEL_FILE))?;
        let grounded = inference.is_some() && keywords.as_ref().is_some_and(|(_, g)| *g);
        let extra = json!({
            "grounded": grounded,
            "group_source": if method == "groupdro" { self.s.get_or("groups", "ground-truth".to_string())? } else { "none".into() },
            "group_inference": inference,
        });
        let result = training_summary(&outcome, &p.dataset, extra)?;
        let mut inputs = vec![("manifest", self.manifest_path()?)];
        if let Some(path) = self.s.path("keywords") {
            inputs.push(("keywords", path));
        }
        let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
        let prov = self.provenance(json!({"trainer": self.trainer()?, "method": method}), &inputs)?;
        self.emit(&out.join("mitigate.json"), &prov, &result)
    }

    // -- evaluate ----------------------------------------------------------

    fn evaluate(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let split = self.split(Split::Test)?;
        if let Some(strategy) = self.s.get::<PromptStrategy>("strategy")? {
            let keywords = self.keyword_map()?;
            let zs = p.zero_shot()?;
            let metrics = zero_shot_eval(
                &p.dataset,
                split,
                &zs,
                strategy,
                keywords.as_ref().map(|(k, _)| k),
                &PromptTemplates::default(),
            )?;
            let grounded = strategy == PromptStrategy::KeywordAugmented && keywords.as_ref().is_some_and(|(_, g)| *g);
            let mut inputs = vec![("manifest", self.manifest_path()?)];
            if let Some(path) = self.s.path("keywords") {
                inputs.push(("keywords", path));
            }
            let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
            let prov = self.provenance(json!({"split": split}), &inputs)?;
            let result = json!({
                "strategy": strategy,
                "grounded": grounded,
                "split": split,
                "provider": grounded_audit::providers::ZeroShotProvider::version(&zs),
                "metrics": metrics,
            });
            return self.emit(&out.join("zero_shot.json"), &prov, &result);
        }
        let (clf, model_path) = self.classifier()?;
        let (preds, metrics) = evaluate_classifier(&clf, &p.dataset, split)?;
        let ids = p.dataset.ids_at(&p.dataset.split_indices(split));
        let predictions: BTreeMap<&str, usize> = ids.into_iter().zip(preds).collect();
        let prov = self.provenance(
            json!({"split": split}),
            &[("manifest", &self.manifest_path()?), ("model", &model_path)],
        )?;
        let result = json!({
            "model": clf.version(),
            "split": split,
            "metrics": metrics,
            "predictions": predictions,
        });
        self.emit(&out.join("metrics.json"), &prov, &result)
    }

    // -- report ------------------------------------------------------------

    fn report(&self) -> Result<()> {
        let out = self.out_dir()?;
        let inputs = self
            .s
            .list("inputs")
            .filter(|l| !l.is_empty())
            .ok_or_else(|| anyhow!("missing required setting `--inputs`"))?;
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for dir in &inputs {
            let dir = PathBuf::from(dir);
            if !dir.is_dir() {
                bail!("report input {} is not a directory", dir.display());
            }
            for name in ARTIFACTS {
                let path = dir.join(name);
                if path.exists() {
                    let label = format!("{}/{}", dir.display(), name.trim_end_matches(".json"));
                    files.push((label, path));
                }
            }
        }
        if files.is_empty() {
            bail!("no stage artifacts found under {}", inputs.join(", "));
        }
        let roles: Vec<(&str, &Path)> = files.iter().map(|(l, p)| (l.as_str(), p.as_path())).collect();
        let mut report = AuditReport::new(self.provenance(json!({}), &roles)?);
        for (label, path) in &files {
            let result: Value = read_result(path)?;
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            add_to_report(&mut report, name, &result).with_context(|| format!("summarizing {}", path.display()))?;
            report.stages.insert(label.clone(), result);
        }
        emit_report(&report, &out.join("report.json"))?;
        Ok(())
    }

    // -- ablate-tau --------------------------------------------------------

    fn ablate_tau(&self) -> Result<()> {
        let out = self.out_dir()?;
        let p = self.providers()?;
        let (clf, model_path) = self.classifier()?;
        let choice = self.heatmap_choice(&p.dataset)?;
        let taus: Vec<f64> = match self.s.list("taus") {
            Some(list) => list
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| anyhow!("invalid tau `{t}`: {e}")))
                .collect::<Result<_>>()?,
            None => (0..=8).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        };
        let stages = self
            .s
            .list("stages")
            .unwrap_or_else(|| vec!["discover".into(), "mitigate".into()]);
        for st in &stages {
            if st != "discover" && st != "mitigate" {
                bail!("unknown ablation stage `{st}` (discover | mitigate)");
            }
        }
        let cam = self.s.get_or("cam_method", CamMethod::GradCam)?;
        let mut points = Vec::new();
        let mut notes = Vec::new();
        for &tau in &taus {
            let grounding = GroundingConfig::new(tau, cam, true)?;
            let mut point = AblationPoint {
                tau,
                precision_at_k: None,
                worst_group_accuracy: None,
                adjusted_average_accuracy: None,
            };
            if stages.iter().any(|s| s == "discover") {
                point.precision_at_k = self.discovery(&p, &clf, &choice, &grounding)?.precision_at_k;
            }
            if stages.iter().any(|s| s == "mitigate") {
                match self.keyword_mitigation(&p, &clf, &choice, &grounding) {
                    Ok(m) => {
                        point.worst_group_accuracy = Some(m.worst_group_accuracy);
                        point.adjusted_average_accuracy = Some(m.adjusted_average_accuracy);
                    }
                    Err(e) => notes.push(format!("tau {tau}: mitigation skipped: {e:#}")),
                }
            }
            points.push(point);
        }
        let prov = self.provenance(
            json!({"taus": taus, "stages": stages}),
            &[("manifest", &self.manifest_path()?), ("model", &model_path)],
        )?;
        self.emit(&out.join("ablation.json"), &prov, &json!({"points": points, "notes": notes}))
    }

    /// Keywords at this grounding, zero-shot inferred groups, GroupDRO, test metrics.
    fn keyword_mitigation(
        &self,
        p: &Providers,
        clf: &PooledLogisticClassifier,
        choice: &HeatmapChoice,
        grounding: &GroundingConfig,
    ) -> Result<GroupedMetrics> {
        let keywords = self.keyword_report(p, clf, choice, grounding)?.top_keywords();
        let zs = p.zero_shot()?;
        let idx = p.dataset.split_indices(Split::Train);
        let inference = infer_groups_zero_shot(&p.dataset, &idx, &keywords, &zs, &PromptTemplates::default())?;
        let outcome = groupdro_fit(
            &self.trainer()?,
            p.recipe,
            &p.dataset,
            &inference.groups,
            self.s.get_or("eta", DEFAULT_ETA)?,
            Selection::BestValidation,
        )?;
        Ok(evaluate_classifier(&outcome.classifier, &p.dataset, Split::Test)?.1)
    }
}

fn training_summary(outcome: &TrainOutcome, dataset: &Dataset, extra: Value) -> Result<Value> {
    let mut metrics = BTreeMap::new();
    for split in [Split::Val, Split::Test] {
        if !dataset.split_indices(split).is_empty() {
            metrics.insert(split.as_str(), evaluate_classifier(&outcome.classifier, dataset, split)?.1);
        }
    }
    let mut v = json!({
        "method": outcome.method,
        "model": outcome.classifier.version(),
        "model_file": MODEL_FILE,
        "selection": outcome.selection,
        "final_loss": outcome.loss_trace.last(),
        "error_set_size": outcome.error_set_size,
        "absent_group_steps": outcome.absent_group_steps,
        "warnings": outcome.warnings,
        "metrics": metrics,
    });
    if let (Value::Object(v), Value::Object(e)) = (&mut v, extra) {
        v.extend(e);
    }
    Ok(v)
}

const ARTIFACTS: &[&str] = &[
    "overlap.json",
    "slices.json",
    "keywords.json",
    "mitigate.json",
    "zero_shot.json",
    "metrics.json",
    "ablation.json",
    "train.json",
];

fn push<T>(section: &mut Option<Vec<T>>, rows: impl IntoIterator<Item = T>) {
    section.get_or_insert_with(Vec::new).extend(rows);
}

fn add_to_report(report: &mut AuditReport, name: &str, result: &Value) -> Result<()> {
    match name {
        "overlap.json" => {
            let o: OverlapReport = serde_json::from_value(result.clone())?;
            let strata = std::iter::once(("overall".to_string(), &o.overall)).chain(o.by_alignment.iter().map(|(k, v)| (k.clone(), v)));
            push(
                &mut report.overlap,
                strata.map(|(stratum, s)| OverlapRow {
                    stratum,
                    count: s.iou_core.count,
                    mean_iou_core: s.iou_core.mean,
                    mean_iou_spurious: s.iou_spurious.mean,
                    median_iou_core: s.iou_core.median,
                    median_iou_spurious: s.iou_spurious.median,
                }),
            );
        }
        "slices.json" => {
            let d: DiscoveryResult = serde_json::from_value(result.clone())?;
            let worst_slice = d
                .slices
                .iter()
                .filter_map(|s| s.accuracy.map(|a| (s.size, a)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            push(
                &mut report.slices,
                [SliceRow {
                    method: d.provenance.method.clone(),
                    grounded: d.provenance.grounding.enabled,
                    k: d.top_k,
                    precision_at_k: d.precision_at_k,
                    num_slices: d.slices.len(),
                    worst_slice,
                }],
            );
        }
        "keywords.json" => {
            let k: KeywordReport = serde_json::from_value(result.clone())?;
            let grounded = k.provenance.grounding.enabled;
            push(
                &mut report.keywords,
                k.classes.iter().flat_map(|c| {
                    c.keywords.iter().map(move |kw| KeywordRow {
                        class: c.class.clone(),
                        grounded,
                        keyword: kw.keyword.clone(),
                        score: kw.score,
                        subgroup_accuracy: kw.subgroup_accuracy,
                    })
                }),
            );
        }
        "mitigate.json" => {
            let metrics: GroupedMetrics = serde_json::from_value(
                result
                    .pointer("/metrics/test")
                    .cloned()
                    .ok_or_else(|| anyhow!("no test metrics"))?,
            )?;
            let method = result["method"].as_str().unwrap_or("unknown");
            let source = result["group_source"].as_str().unwrap_or("none");
            let method = if source == "none" { method.to_string() } else { format!("{method} ({source} groups)") };
            push(
                &mut report.mitigation,
                [MetricRow {
                    method,
                    grounded: result["grounded"].as_bool().unwrap_or(false),
                    metrics,
                }],
            );
        }
        "zero_shot.json" => {
            let metrics: GroupedMetrics = serde_json::from_value(result["metrics"].clone())?;
            push(
                &mut report.zero_shot,
                [MetricRow {
                    method: result["strategy"].as_str().unwrap_or("unknown").to_string(),
                    grounded: result["grounded"].as_bool().unwrap_or(false),
                    metrics,
                }],
            );
        }
        "ablation.json" => {
            let points: Vec<AblationPoint> = serde_json::from_value(result["points"].clone())?;
            push(&mut report.ablation, points);
        }
        // Kept verbatim under `stages` only.
        _ => {}
    }
    Ok(())
}
