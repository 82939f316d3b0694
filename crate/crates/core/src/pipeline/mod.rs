//! End-to-end run: selection, propagation, prompting, segmentation.
//!
//! Every stage writes its artifacts below `output_dir`:
//!
//! ```text
//! selection.json            support ids and the query → support assignment
//! embeddings.<tag>.mpae     embedding cache
//! fields/<id>.mpad          deformation field per query
//! coarse/<id>.png           propagated mask (0.5 threshold)
//! prompts/<id>.json, .mpal  prompt set and its logit sidecar
//! predictions/<id>.png      final mask
//! report.json, report.csv   run report
//! ```

mod config;
mod report;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{EmbeddingBackend, PipelineConfig, SegmentationBackend, Toggles};
pub use report::{evaluate, Aggregates, EvalReport, EvalRow, Manifest, QueryRecord, QueryTimings, RunReport, StageTimings};
pub use synth::{make_synthetic_dataset, synthetic_id, synthetic_specs, BlobSpec, SYNTH_SIZE};

use crate::backend::{ClientOptions, WireClient};
use crate::embed::{embed_all, Embedder, EmbeddingCache, ExternalEmbedder, ToyEmbedder};
use crate::error::{Error, Result};
use crate::formats::{write_bytes, write_field};
use crate::io::{list_dataset, load_image, load_mask, save_mask};
use crate::metrics::dice;
use crate::prompt::generate_prompts;
use crate::register::{propagate_mask, register};
use crate::segment::{refine, CachedSegmenter, ExternalSegmenter, MockSegmenter, SegmentationRequest, Segmenter};
use crate::select::{select_support, DistanceMatrix, SelectionRecord, SelectionResult};
use crate::tensor::{BinaryMask, Image, SampleRecord};

/// Selection artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub support_ids: Vec<String>,
    pub objective: f64,
    pub records: Vec<SelectionRecord>,
}

impl SelectionFile {
    pub fn new(sel: &SelectionResult) -> Self {
        Self {
            support_ids: sel.support_ids.clone(),
            objective: sel.objective,
            records: sel.records(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self).expect("selection serializes");
        text.push(b'\n');
        write_bytes(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Live backends for one run.
pub struct Backends {
    pub embedder: Box<dyn Embedder>,
    /// Absent when prompting is off.
    pub segmenter: Option<Box<dyn Segmenter>>,
}

impl Segmenter for Box<dyn Segmenter> {
    fn segment(&self, req: &SegmentationRequest<'_>) -> Result<crate::segment::SegmentationResult> {
        (**self).segment(req)
    }
}

fn client_options(cfg: &PipelineConfig) -> ClientOptions {
    ClientOptions {
        timeout: Duration::from_secs_f64(cfg.backend_timeout_secs),
        max_in_flight: cfg.backend_max_in_flight,
    }
}

/// Embedder named by the configuration; external ones are connected here.
pub fn build_embedder(cfg: &PipelineConfig) -> Result<Box<dyn Embedder>> {
    Ok(match &cfg.embedding_backend {
        EmbeddingBackend::Toy => Box::new(ToyEmbedder),
        EmbeddingBackend::External(ep) => {
            let client = WireClient::connect(ep, client_options(cfg))?;
            let tag = format!("ext{}", client.dim().map_or(String::new(), |d| format!("-{d}")));
            Box::new(ExternalEmbedder::new(client, tag, cfg.output_dir.join("work").join("embed"))?)
        }
    })
}

/// Segmenter named by the configuration, regardless of the toggles.
pub fn build_segmenter(cfg: &PipelineConfig) -> Result<Box<dyn Segmenter>> {
    Ok(match &cfg.segmentation_backend {
        SegmentationBackend::Mock => Box::new(MockSegmenter {
            tolerance: cfg.mock_tolerance,
        }),
        SegmentationBackend::External(ep) => {
            let client = WireClient::connect(ep, client_options(cfg))?;
            Box::new(CachedSegmenter::new(ExternalSegmenter::new(
                client,
                cfg.output_dir.join("work").join("segment"),
            )?))
        }
    })
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            embedder: build_embedder(cfg)?,
            segmenter: if cfg.toggles.pa { Some(build_segmenter(cfg)?) } else { None },
        })
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Dataset loaded at pipeline resolution.
pub struct LoadedDataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Image<f32>>,
    pub masks: Vec<Option<BinaryMask>>,
}

impl LoadedDataset {
    pub fn load(root: &Path, size: usize) -> Result<Self> {
        let records = list_dataset(root)?;
        let loaded: Vec<(Image<f32>, Option<BinaryMask>)> = records
            .par_iter()
            .map(|r| {
                let img = load_image::<f32>(&r.image_path, Some(size))?;
                let mask = r.mask_path.as_ref().map(|p| load_mask(p, Some(size))).transpose()?;
                Ok((img, mask))
            })
            .collect::<Result<_>>()?;
        let (images, masks) = loaded.into_iter().unzip();
        Ok(Self { records, images, masks })
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

/// Embed the dataset through the on-disk cache in `out_dir`.
pub fn embed_dataset(embedder: &dyn Embedder, data: &LoadedDataset, out_dir: &Path) -> Result<Vec<crate::embed::Embedding>> {
    let tag = embedder.tag();
    let path = EmbeddingCache::path_in(out_dir, &tag);
    let mut cache = if path.is_file() {
        EmbeddingCache::read(&path, tag)?
    } else {
        EmbeddingCache::new(tag)
    };
    let samples: Vec<(String, Image<f32>)> = data.ids().into_iter().zip(data.images.iter().cloned()).collect();
    let before = cache.len();
    let embeddings = embed_all(embedder, &mut cache, &samples)?;
    if cache.len() != before || !path.is_file() {
        cache.write(&path)?;
    }
    Ok(embeddings)
}

/// Support set and assignment. With selection off the first `k` ids (already
/// in lexicographic order) are the supports and queries still go to their
/// nearest support in embedding space.
pub fn choose_supports(ids: &[String], vectors: &[crate::embed::Embedding], k: usize, es: bool) -> Result<SelectionResult> {
    if es {
        select_support(ids, vectors, k)
    } else {
        let dist = DistanceMatrix::cosine(vectors)?;
        SelectionResult::from_supports(ids, &dist, &(0..k).collect::<Vec<_>>())
    }
}

struct QueryContext<'a> {
    cfg: &'a PipelineConfig,
    data: &'a LoadedDataset,
    segmenter: Option<&'a dyn Segmenter>,
    out: &'a Path,
}

impl QueryContext<'_> {
    fn run(&self, q: usize, s: usize) -> QueryRecord {
        let start = Instant::now();
        let mut rec = QueryRecord {
            query_id: self.data.records[q].id.clone(),
            support_id: self.data.records[s].id.clone(),
            coarse_dice: None,
            final_dice: None,
            fallback_flag: false,
            rounds: 0,
            confidence: None,
            warning: None,
            error: None,
            timings: QueryTimings::default(),
        };
        if let Err(e) = self.process(q, s, &mut rec) {
            log::warn!("{}: {e}", rec.query_id);
            rec.error = Some(e.to_string());
        }
        rec.timings.total_ms = ms(start.elapsed());
        rec
    }

    fn process(&self, q: usize, s: usize, rec: &mut QueryRecord) -> Result<()> {
        let id = rec.query_id.as_str();
        let support_mask = self.data.masks[s]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("support {} has no mask", rec.support_id)))?;
        let truth = self.data.masks[q].as_ref();

        let t = Instant::now();
        let moving = self.data.images[s].grayscale().cast::<f64>();
        let fixed = self.data.images[q].grayscale().cast::<f64>();
        let field = register(&moving, &fixed, &self.cfg.registration)?;
        write_field(&field.cast::<f32>(), &self.out.join("fields").join(format!("{id}.mpad")))?;
        let coarse_soft = propagate_mask(support_mask, &field)?;
        let coarse = coarse_soft.threshold();
        save_mask(&coarse, &self.out.join("coarse").join(format!("{id}.png")))?;
        rec.timings.register_ms = ms(t.elapsed());
        if let Some(gt) = truth {
            rec.coarse_dice = Some(dice(&coarse, gt)?);
        }

        let prediction = match self.segmenter {
            None => coarse,
            Some(seg) => {
                let t = Instant::now();
                let prompts = generate_prompts(&coarse_soft, &self.cfg.prompt);
                prompts.write(&self.out.join("prompts").join(format!("{id}.json")))?;
                rec.fallback_flag = prompts.fallback;
                rec.timings.prompt_ms = ms(t.elapsed());

                let t = Instant::now();
                let image = &self.data.images[q];
                let first = seg.segment(&SegmentationRequest {
                    sample_id: id,
                    image,
                    prompts: &prompts,
                })?;
                let result = refine(
                    seg,
                    id,
                    image,
                    &prompts,
                    first,
                    self.cfg.effective_rounds(),
                    self.cfg.prompt.soften_scale,
                );
                rec.timings.segment_ms = ms(t.elapsed());
                rec.rounds = result.round;
                rec.confidence = Some(result.confidence);
                rec.warning = result.warning;
                result.mask
            }
        };
        save_mask(&prediction, &self.out.join("predictions").join(format!("{id}.png")))?;
        if let Some(gt) = truth {
            rec.final_dice = Some(dice(&prediction, gt)?);
        }
        Ok(())
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Run with backends built from the configuration.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let backends = Backends::from_config(cfg)?;
    run_with(cfg, &backends)
}

pub fn run_with(cfg: &PipelineConfig, backends: &Backends) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.toggles.pa && backends.segmenter.is_none() {
        return Err(Error::Config("prompting is on but no segmenter was supplied".into()));
    }
    let total = Instant::now();
    let out: PathBuf = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let workers = pool(cfg.workers)?;

    workers.install(|| {
        let t = Instant::now();
        let data = LoadedDataset::load(&cfg.dataset_root, cfg.image_size)?;
        cfg.validate_for(data.records.len())?;
        let load_ms = ms(t.elapsed());
        log::info!("loaded {} samples from {}", data.records.len(), cfg.dataset_root.display());

        let t = Instant::now();
        let embeddings = embed_dataset(backends.embedder.as_ref(), &data, &out)?;
        let embed_ms = ms(t.elapsed());

        let t = Instant::now();
        let ids = data.ids();
        let selection = choose_supports(&ids, &embeddings, cfg.k, cfg.toggles.es)?;
        SelectionFile::new(&selection).write(&out.join("selection.json"))?;
        for sid in &selection.support_ids {
            let i = data.index_of(sid).expect("support comes from the dataset");
            if data.masks[i].is_none() {
                return Err(Error::InvalidInput(format!("support sample {sid} has no mask")));
            }
        }
        let select_ms = ms(t.elapsed());
        log::info!("supports: {}", selection.support_ids.join(", "));

        let t = Instant::now();
        let jobs: Vec<(usize, usize)> = selection
            .assignment
            .iter()
            .map(|(q, s)| (data.index_of(q).expect("query id"), data.index_of(s).expect("support id")))
            .collect();
        let ctx = QueryContext {
            cfg,
            data: &data,
            segmenter: backends.segmenter.as_deref(),
            out: &out,
        };
        let records: Vec<QueryRecord> = jobs.par_iter().map(|&(q, s)| ctx.run(q, s)).collect();
        let queries_ms = ms(t.elapsed());

        let mut input_hashes = BTreeMap::new();
        for r in &data.records {
            input_hashes.insert(relative(&r.image_path, &cfg.dataset_root), sha256_file(&r.image_path)?);
            if let Some(m) = &r.mask_path {
                input_hashes.insert(relative(m, &cfg.dataset_root), sha256_file(m)?);
            }
        }
        let stage = StageTimings {
            load_ms,
            embed_ms,
            select_ms,
            queries_ms,
            total_ms: ms(total.elapsed()),
        };
        let report = RunReport {
            manifest: Manifest {
                tool: "mpa".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                toggles: cfg.toggles.to_string(),
                config: cfg.clone(),
                support_ids: selection.support_ids.clone(),
                input_hashes,
            },
            aggregates: Aggregates::from_records(&records, stage),
            records,
        };
        report.write_json(&out.join("report.json"))?;
        report.write_csv(&out.join("report.csv"))?;
        Ok(report)
    })
}
