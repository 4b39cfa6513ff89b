use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::losses::{adv_objective, cls_objective, generator_adv_loss, loss_kld, loss_rec};
use super::Model;
use crate::config::TrainConfig;
use crate::diffcore::{gaussian_sample, AdamConfig, Checkpoint, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PlanarTensor;
use crate::synthdata::{Dataset, SceneRecord};

/// Positive `positive` of scene `scene`, paired with its negative `negative`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub scene: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Stacked training inputs, `[B, ...]` each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub bg: Tensor,
    pub fg: Tensor,
    pub mask: Tensor,
    pub pos: Tensor,
    pub pos_mask: Tensor,
    pub t_gt: Tensor,
    pub neg: Option<(Tensor, Tensor)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.bg.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_scenes(scenes: &[SceneRecord], items: &[BatchItem], with_negatives: bool) -> Result<Self> {
        let mut pos = Vec::with_capacity(items.len());
        let mut neg = Vec::with_capacity(items.len());
        let mut t_gt = Vec::with_capacity(items.len() * 3);
        for it in items {
            let s = scenes
                .get(it.scene)
                .ok_or_else(|| Error::Config(format!("no scene {}", it.scene)))?;
            let t = *s
                .positives
                .get(it.positive)
                .ok_or_else(|| Error::Config(format!("scene {} has no positive {}", it.scene, it.positive)))?;
            pos.push(s.sample(t, crate::synthdata::Label::Positive)?);
            t_gt.extend(t.to_array());
            if with_negatives {
                let tn = *s
                    .negatives
                    .get(it.negative)
                    .ok_or_else(|| Error::Config(format!("scene {} has no negative {}", it.scene, it.negative)))?;
                neg.push(s.sample(tn, crate::synthdata::Label::Negative)?);
            }
        }
        let of = |f: &dyn Fn(&SceneRecord) -> &PlanarTensor| {
            PlanarTensor::batch(&items.iter().map(|it| f(&scenes[it.scene])).collect::<Vec<_>>())
        };
        let neg = if with_negatives {
            Some((
                PlanarTensor::batch(&neg.iter().map(|s| &s.composite).collect::<Vec<_>>())?,
                PlanarTensor::batch(&neg.iter().map(|s| &s.composite_mask).collect::<Vec<_>>())?,
            ))
        } else {
            None
        };
        Ok(Batch {
            bg: of(&|s| &s.bg)?,
            fg: of(&|s| &s.fg)?,
            mask: of(&|s| &s.mask)?,
            pos: PlanarTensor::batch(&pos.iter().map(|s| &s.composite).collect::<Vec<_>>())?,
            pos_mask: PlanarTensor::batch(&pos.iter().map(|s| &s.composite_mask).collect::<Vec<_>>())?,
            t_gt: Tensor::new(&[items.len(), 3], t_gt)?,
            neg,
        })
    }
}

/// Loss values of one step (or their mean over an epoch). Disabled terms are
/// reported as 0. `cls` is the discriminator's labelled-pair term (at most 0).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv_u: f64,
    pub adv_s: f64,
    pub kld: f64,
    pub rec: f64,
    pub cls: f64,
    pub d_loss: f64,
    /// Generator objective: `adv_u + adv_s + kld + lambda * rec`.
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "adv_u,adv_s,kld,rec,cls,d_loss,total";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.adv_u, self.adv_s, self.kld, self.rec, self.cls, self.d_loss, self.total
        )
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown {
            lambda: items.first().map_or(0.0, |l| l.lambda),
            ..Default::default()
        };
        for l in items {
            m.adv_u += l.adv_u / n;
            m.adv_s += l.adv_s / n;
            m.kld += l.kld / n;
            m.rec += l.rec / n;
            m.cls += l.cls / n;
            m.d_loss += l.d_loss / n;
            m.total += l.total / n;
        }
        m
    }
}

fn add_term(g: &mut Graph, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, term)?,
        None => term,
    }))
}

/// Alternating discriminator/generator optimisation of both paths.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    /// Steps taken so far; seeds the per-step noise.
    pub step: u64,
    /// Epochs completed so far; seeds the per-epoch shuffle.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model_config()?, cfg.seed)?;
        let mut t = Trainer {
            model,
            cfg,
            step: 0,
            epoch: 0,
        };
        t.apply_lr_scales();
        Ok(t)
    }

    /// Resumes from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut t = Trainer::new(cfg)?;
        for line in ck.header.lines() {
            let parse = |v: &str| v.parse::<u64>().map_err(|_| Error::Checkpoint(format!("bad header line '{line}'")));
            if let Some(v) = line.strip_prefix("epoch=") {
                t.epoch = parse(v)? as usize;
            } else if let Some(v) = line.strip_prefix("step=") {
                t.step = parse(v)?;
            }
        }
        t.model.load_weights(ck)?;
        t.apply_lr_scales();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, &format!("epoch={}\nstep={}\n", self.epoch, self.step))
    }

    /// Generator base rate is `lr_high`; the backbone runs at `lr_low`.
    fn apply_lr_scales(&mut self) {
        self.model
            .generator
            .set_lr_scale("backbone.", self.cfg.lr_low / self.cfg.lr_high);
    }

    fn adversarial(&self) -> bool {
        (self.cfg.path_u && self.cfg.adv_u) || (self.cfg.path_s && self.cfg.adv_s)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let cfg = self.cfg.clone();
        let adversarial = self.adversarial();
        let model = &mut self.model;
        let mut rng = Rng::derived(cfg.seed, (1 << 32) + self.step);
        let b = batch.len();
        let mut out = LossBreakdown {
            lambda: cfg.lambda,
            ..Default::default()
        };

        let mut g = Graph::new(true);
        let pg = model.generator.bind(&mut g);
        let bg = g.constant(batch.bg.clone());
        let fg = g.constant(batch.fg.clone());
        let mask = g.constant(batch.mask.clone());
        let pos = g.constant(batch.pos.clone());
        let pos_mask = g.constant(batch.pos_mask.clone());
        let enc = model.gcm.encode(&mut g, &pg, bg, fg, mask)?;

        let path_u = if cfg.path_u {
            let z = g.constant(rng.normal_tensor(&[b, model.config.latent_dim]));
            Some(model.generator_forward(&mut g, &pg, &enc, bg, fg, mask, z)?)
        } else {
            None
        };

        let mut kld = None;
        let mut rec = None;
        let path_s = if cfg.path_s {
            let (mu, logvar) = model.encode_latent(&mut g, &pg, pos, pos_mask, cfg.freeze_latent_backbone)?;
            let z = if cfg.sample_latent {
                let half = g.scale(logvar, 0.5);
                let sigma = g.exp(half);
                gaussian_sample(&mut g, &mut rng, mu, sigma)?
            } else {
                mu
            };
            let gen = model.generator_forward(&mut g, &pg, &enc, bg, fg, mask, z)?;
            if cfg.kld {
                kld = Some(loss_kld(&mut g, mu, logvar)?);
            }
            if cfg.rec {
                let t_gt = g.constant(batch.t_gt.clone());
                rec = Some(loss_rec(&mut g, gen.t, t_gt, cfg.rec_variant)?);
            }
            Some(gen)
        } else {
            None
        };

        // discriminator step on detached fakes
        let use_neg = cfg.use_negatives && batch.neg.is_some();
        if adversarial || use_neg {
            let mut gd = Graph::new(true);
            let pd = model.discriminator.bind(&mut gd);
            let real_i = gd.constant(batch.pos.clone());
            let real_m = gd.constant(batch.pos_mask.clone());
            let d_real = model.disc.forward(&mut gd, &pd, real_i, real_m)?;
            let mut objective = None;
            for (on, gen) in [(cfg.adv_u, &path_u), (cfg.adv_s, &path_s)] {
                if let (true, Some(gen)) = (on, gen) {
                    let fi = gd.constant(g.value(gen.composite).clone());
                    let fm = gd.constant(g.value(gen.placed_mask).clone());
                    let d_fake = model.disc.forward(&mut gd, &pd, fi, fm)?;
                    let term = adv_objective(&mut gd, d_real, d_fake)?;
                    objective = add_term(&mut gd, objective, term)?;
                }
            }
            if use_neg {
                let (ni, nm) = batch.neg.as_ref().expect("checked above");
                let ni = gd.constant(ni.clone());
                let nm = gd.constant(nm.clone());
                let d_neg = model.disc.forward(&mut gd, &pd, ni, nm)?;
                let cls = cls_objective(&mut gd, d_real, d_neg)?;
                out.cls = gd.value(cls).item();
                objective = add_term(&mut gd, objective, cls)?;
            }
            if let Some(obj) = objective {
                let loss = gd.scale(obj, -1.0);
                out.d_loss = gd.value(loss).item();
                gd.backward(loss)?;
                model.discriminator.accumulate_grads(&gd, &pd);
                model.discriminator.adam_step(cfg.lr_low, AdamConfig::default());
            }
        }

        // generator step against the updated, frozen discriminator
        let mut total = None;
        if adversarial {
            let pd = model.discriminator.bind_frozen(&mut g);
            if let (true, Some(gen)) = (cfg.adv_u, &path_u) {
                let d = model.disc.forward(&mut g, &pd, gen.composite, gen.placed_mask)?;
                let l = generator_adv_loss(&mut g, d, cfg.saturating);
                out.adv_u = g.value(l).item();
                total = add_term(&mut g, total, l)?;
            }
            if let (true, Some(gen)) = (cfg.adv_s, &path_s) {
                let d = model.disc.forward(&mut g, &pd, gen.composite, gen.placed_mask)?;
                let l = generator_adv_loss(&mut g, d, cfg.saturating);
                out.adv_s = g.value(l).item();
                total = add_term(&mut g, total, l)?;
            }
        }
        if let Some(k) = kld {
            out.kld = g.value(k).item();
            total = add_term(&mut g, total, k)?;
        }
        if let Some(r) = rec {
            out.rec = g.value(r).item();
            let w = g.scale(r, cfg.lambda);
            total = add_term(&mut g, total, w)?;
        }
        if let Some(total) = total {
            out.total = g.value(total).item();
            if g.requires_grad(total) {
                g.backward(total)?;
                model.generator.accumulate_grads(&g, &pg);
            }
        }
        let stats = g.take_stat_updates();
        model.generator.apply_stat_updates(&stats, &pg, cfg.bn_momentum);
        model.generator.adam_step(cfg.lr_high, AdamConfig::default());
        self.step += 1;
        Ok(out)
    }

    /// Shuffled batches over every positive for the current epoch; each
    /// positive is paired with a random negative of its scene. A trailing
    /// partial batch is kept when it holds at least two samples.
    pub fn epoch_batches(&self, scenes: &[SceneRecord]) -> Vec<Vec<BatchItem>> {
        let mut rng = Rng::derived(self.cfg.seed, (2 << 32) + self.epoch as u64);
        let mut items = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            for k in 0..s.positives.len() {
                items.push(BatchItem {
                    scene: i,
                    positive: k,
                    negative: 0,
                });
            }
        }
        rng.shuffle(&mut items);
        for it in &mut items {
            let n = scenes[it.scene].negatives.len();
            it.negative = if n > 0 { rng.index(0, n) } else { 0 };
        }
        items
            .chunks(self.cfg.batch)
            .filter(|c| c.len() >= 2 || c.len() == items.len())
            .map(|c| c.to_vec())
            .collect()
    }

    /// Runs one epoch (or the first `max_steps` of it). Every step appends a
    /// CSV row to `step_log`. Returns the mean losses.
    pub fn train_epoch(
        &mut self,
        scenes: &[SceneRecord],
        mut step_log: Option<&mut dyn Write>,
        max_steps: Option<usize>,
    ) -> Result<LossBreakdown> {
        let batches = self.epoch_batches(scenes);
        let limit = max_steps.unwrap_or(usize::MAX);
        let mut losses = Vec::new();
        for items in batches.iter().take(limit) {
            let batch = Batch::from_scenes(scenes, items, self.cfg.use_negatives)?;
            let l = self.train_step(&batch)?;
            if let Some(w) = step_log.as_deref_mut() {
                writeln!(w, "{},{},{}", self.step, self.epoch, l.csv_fields())?;
            }
            losses.push(l);
        }
        self.epoch += 1;
        Ok(LossBreakdown::mean(&losses))
    }
}

/// The first `n` positives of the dataset, one per scene while scenes last.
pub fn overfit_items(scenes: &[SceneRecord], n: usize) -> Vec<BatchItem> {
    let per_scene = scenes.iter().map(|s| s.positives.len()).max().unwrap_or(0);
    (0..per_scene)
        .flat_map(|k| {
            scenes
                .iter()
                .enumerate()
                .filter(move |(_, s)| k < s.positives.len())
                .map(move |(i, _)| BatchItem {
                    scene: i,
                    positive: k,
                    negative: 0,
                })
        })
        .take(n)
        .collect()
}

impl Trainer {
    /// Repeats `train_step` on one fixed batch until the reconstruction loss
    /// drops below `target` or `max_steps` steps ran. Returns every step's
    /// losses.
    pub fn overfit(
        &mut self,
        batch: &Batch,
        max_steps: usize,
        target: f64,
        mut step_log: Option<&mut dyn Write>,
    ) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::new();
        for _ in 0..max_steps {
            let l = self.train_step(batch)?;
            if let Some(w) = step_log.as_deref_mut() {
                writeln!(w, "{},{},{}", self.step, self.epoch, l.csv_fields())?;
            }
            out.push(l);
            if l.rec < target {
                break;
            }
        }
        Ok(out)
    }
}

/// Scenes held out for the per-epoch accuracy probe.
pub fn probe_scenes(cfg: &TrainConfig) -> Result<Vec<SceneRecord>> {
    let opts = crate::synthdata::DatasetOptions {
        seed: cfg.seed ^ 0x7072_6f62_6500,
        scenes: cfg.probe_scenes,
        side: cfg.side,
        positives: 1,
        negatives: 1,
        baseline_draws: 0,
        ..Default::default()
    };
    Ok(crate::synthdata::gen_dataset(&opts)?.scenes)
}

pub const STEP_LOG_HEADER: &str = "step,epoch,adv_u,adv_s,kld,rec,cls,d_loss,total";
pub const METRICS_HEADER: &str = "epoch,adv_u,adv_s,kld,rec,cls,d_loss,total,accuracy";

/// Trains for `cfg.epochs` epochs from the trainer's current epoch, writing
/// into `out`: `config.txt`, `steps.csv`, `metrics.csv` (one row per epoch
/// with the probe accuracy) and `epoch_NNN.ckpt` plus `last.ckpt`.
pub fn fit(trainer: &mut Trainer, data: &Dataset, probe: &[SceneRecord], out: &Path, max_steps: Option<usize>) -> Result<Vec<String>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), trainer.cfg.to_text())?;
    let fresh = trainer.epoch == 0;
    let open = |name: &str, header: &str| -> Result<std::fs::File> {
        let path = out.join(name);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(path)?;
        if fresh {
            writeln!(f, "{header}")?;
        }
        Ok(f)
    };
    let mut steps = std::io::BufWriter::new(open("steps.csv", STEP_LOG_HEADER)?);
    let mut metrics = open("metrics.csv", METRICS_HEADER)?;
    let mut rows = Vec::new();
    let mut remaining = max_steps;
    while trainer.epoch < trainer.cfg.epochs && remaining != Some(0) {
        let before = trainer.step;
        let mean = trainer.train_epoch(&data.scenes, Some(&mut steps), remaining)?;
        steps.flush()?;
        if let Some(r) = remaining.as_mut() {
            *r = r.saturating_sub((trainer.step - before) as usize);
        }
        let mut rng = Rng::derived(trainer.cfg.seed, (3 << 32) + trainer.epoch as u64);
        let acc = crate::eval::accuracy(&trainer.model, probe, &mut rng, 1)?;
        let mut row = String::new();
        let _ = write!(row, "{},{},{}", trainer.epoch, mean.csv_fields(), acc);
        writeln!(metrics, "{row}")?;
        rows.push(row);
        trainer.save(&out.join(format!("epoch_{:03}.ckpt", trainer.epoch)))?;
        trainer.save(&out.join("last.ckpt"))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_dataset, DatasetOptions};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            preset: "tiny".into(),
            side: 16,
            batch: 4,
            seed: 1,
            probe_scenes: 4,
            ..Default::default()
        }
    }

    fn tiny_data(scenes: usize) -> Dataset {
        gen_dataset(&DatasetOptions {
            seed: 2,
            scenes,
            side: 16,
            positives: 2,
            negatives: 2,
            baseline_draws: 0,
            ..Default::default()
        })
        .unwrap()
    }

    fn first_batch(t: &Trainer, data: &Dataset) -> Batch {
        let items = &t.epoch_batches(&data.scenes)[0];
        Batch::from_scenes(&data.scenes, items, t.cfg.use_negatives).unwrap()
    }

    #[test]
    fn rec_is_inert_at_zero_lambda() {
        let data = tiny_data(3);
        let run = |rec: bool| {
            let cfg = TrainConfig {
                lambda: 0.0,
                rec,
                ..tiny_cfg()
            };
            let mut t = Trainer::new(cfg).unwrap();
            let batch = first_batch(&t, &data);
            let l = t.train_step(&batch).unwrap();
            (t.model, l)
        };
        let (a, la) = run(true);
        let (b, lb) = run(false);
        assert!(la.rec > 0.0);
        assert_eq!(lb.rec, 0.0);
        assert_eq!(la.total, lb.total);
        for (x, y) in a.generator.iter().zip(b.generator.iter()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
    }

    #[test]
    fn every_submodule_moves_after_one_step() {
        let data = tiny_data(3);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let before = t.model.clone();
        let batch = first_batch(&t, &data);
        let l = t.train_step(&batch).unwrap();
        assert!(l.adv_u > 0.0 && l.adv_s > 0.0 && l.cls < 0.0 && l.d_loss > 0.0);
        let moved = |reg_a: &crate::diffcore::ParamRegistry, reg_b: &crate::diffcore::ParamRegistry, prefix: &str| {
            reg_a
                .iter()
                .zip(reg_b.iter())
                .any(|(x, y)| x.name.starts_with(prefix) && x.value != y.value)
        };
        for prefix in ["backbone", "neh_fg", "neh_bg", "attn", "reg", "latent"] {
            assert!(moved(&before.generator, &t.model.generator, prefix), "{prefix} unchanged");
        }
        assert!(moved(&before.discriminator, &t.model.discriminator, "disc"));
    }

    #[test]
    fn placement_encodings_receive_gradient() {
        let data = tiny_data(3);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let before = t.model.generator.clone();
        let batch = first_batch(&t, &data);
        t.train_step(&batch).unwrap();
        // an Adam step moves an entry only if its accumulated gradient was nonzero
        for name in ["attn.key_enc", "attn.value_enc"] {
            let a = before.by_name(name).unwrap();
            let b = t.model.generator.by_name(name).unwrap();
            let moved = a.value.data().iter().zip(b.value.data()).filter(|(x, y)| x != y).count();
            assert!(moved > a.value.numel() / 2, "{name}: {moved}");
        }
    }

    #[test]
    fn overfit_drives_rec_down() {
        let data = tiny_data(1);
        let cfg = TrainConfig {
            batch: 1,
            ..TrainConfig {
                preset: "tiny".into(),
                side: 16,
                seed: 3,
                ..TrainConfig::overfit()
            }
        };
        let mut t = Trainer::new(cfg).unwrap();
        let items = [BatchItem {
            scene: 0,
            positive: 0,
            negative: 0,
        }];
        let batch = Batch::from_scenes(&data.scenes, &items, false).unwrap();
        let first = t.train_step(&batch).unwrap().rec;
        let mut last = first;
        for _ in 0..200 {
            last = t.train_step(&batch).unwrap().rec;
        }
        assert!(last < first * 0.05, "{first} -> {last}");
    }

    #[test]
    fn ten_steps_are_deterministic_and_resumable() {
        let data = tiny_data(6);
        let dir = tempfile::tempdir().unwrap();
        let run = |out: &Path| {
            let mut t = Trainer::new(TrainConfig { epochs: 5, ..tiny_cfg() }).unwrap();
            let probe = probe_scenes(&t.cfg).unwrap();
            fit(&mut t, &data, &probe, out, Some(10)).unwrap();
            (t, std::fs::read(out.join("steps.csv")).unwrap(), std::fs::read(out.join("metrics.csv")).unwrap())
        };
        let (ta, sa, ma) = run(&dir.path().join("a"));
        let (_, sb, mb) = run(&dir.path().join("b"));
        assert_eq!(ta.step, 10);
        assert_eq!(sa, sb);
        assert_eq!(ma, mb);
        assert_eq!(String::from_utf8(sa).unwrap().lines().count(), 11);

        let back = Trainer::resume(ta.cfg.clone(), &dir.path().join("a/last.ckpt")).unwrap();
        assert_eq!(back.step, ta.step);
        assert_eq!(back.epoch, ta.epoch);
        for (x, y) in back.model.generator.iter().zip(ta.model.generator.iter()) {
            assert_eq!(x.value, y.value);
        }
    }
}
