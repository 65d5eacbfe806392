use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{render, Color, Scene, Shape};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MIN_SCENES: usize = 10;

/// Fixed prompt sets. One caption prompt is drawn per training iteration; the
/// VQA prompt is the question itself.
pub const CAPTION_PROMPTS: [&str; 3] = ["describe the image", "write a short caption", "what is in the picture ?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub image: Tensor<f32>,
    pub caption_ids: Vec<usize>,
    pub qa: Vec<QaPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split fractions plus the compositional holdout: scenes holding any listed
/// (shape, color) object go to test only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub holdout: Vec<(Shape, Color)>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.7, val_frac: 0.15, holdout: vec![(Shape::Circle, Color::Red)] }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f.is_finite() && (0.0..=1.0).contains(&f);
        if !ok(self.train_frac) || !ok(self.val_frac) || self.train_frac + self.val_frac > 1.0 {
            return Err(Error::Config(format!(
                "split fractions train={} val={} must be in [0,1] and sum to at most 1",
                self.train_frac, self.val_frac
            )));
        }
        Ok(())
    }

    pub fn is_held_out(&self, scene: &Scene) -> bool {
        self.holdout.iter().any(|&(s, c)| scene.has_combo(s, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub n_scenes: usize,
    pub spec: SplitSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Test samples containing a held-out combination.
    pub fn holdout_test(&self) -> Vec<&Sample> {
        self.test.iter().filter(|s| self.spec.is_held_out(&s.scene)).collect()
    }

    /// Fails if a held-out combination appears in train or val, or if a scene
    /// id occurs in more than one split.
    pub fn audit(&self) -> Result<()> {
        for split in [Split::Train, Split::Val] {
            if let Some(s) = self.split(split).iter().find(|s| self.spec.is_held_out(&s.scene)) {
                return Err(Error::Audit(format!(
                    "scene {} in {} holds a held-out combination",
                    s.scene.id,
                    split.name()
                )));
            }
        }
        let mut ids: Vec<u64> = Split::ALL.iter().flat_map(|&s| self.split(s).iter().map(|x| x.scene.id)).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Audit("splits are not disjoint".into()));
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, id: u64) -> Rng {
    Rng::new(seed).split(id)
}

fn build_sample(vocab: &Vocab, seed: u64, id: u64) -> Result<(Sample, f64)> {
    let mut rng = scene_rng(seed, id);
    let scene = Scene::random(id, seed, &mut rng);
    let mut questions = scene.questions();
    rng.shuffle(&mut questions);
    let k = 1 + rng.below(questions.len().min(3));
    questions.truncate(k);
    let assign = rng.uniform();
    let caption_ids = vocab.tokenize(&scene.caption(), true)?;
    let qa = questions
        .iter()
        .map(|(q, a)| Ok(QaPair { question_ids: vocab.tokenize(q, true)?, answer_ids: vocab.tokenize(a, true)? }))
        .collect::<Result<Vec<_>>>()?;
    let image = render(&scene);
    Ok((Sample { scene, image, caption_ids, qa }, assign))
}

/// Generates `n_scenes` scenes. Each scene draws from its own sub-stream of
/// `seed`, so the result does not depend on thread count.
pub fn gen_dataset(seed: u64, n_scenes: usize, spec: &SplitSpec) -> Result<Dataset> {
    if n_scenes < MIN_SCENES {
        return Err(Error::Config(format!("n_scenes must be at least {MIN_SCENES}, got {n_scenes}")));
    }
    spec.validate()?;
    let vocab = Vocab::new();
    let built = exec::try_map_indexed(n_scenes, |i| build_sample(&vocab, seed, i as u64))?;
    let mut ds = Dataset { seed, n_scenes, spec: spec.clone(), train: vec![], val: vec![], test: vec![] };
    for (sample, u) in built {
        if spec.is_held_out(&sample.scene) {
            ds.test.push(sample);
        } else if u < spec.train_frac {
            ds.train.push(sample);
        } else if u < spec.train_frac + spec.val_frac {
            ds.val.push(sample);
        } else {
            ds.test.push(sample);
        }
    }
    if ds.train.is_empty() {
        return Err(Error::Config("holdout rule and split fractions leave no training scenes".into()));
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n_scenes: usize,
    split_spec: SplitSpec,
    vocab_size: usize,
    counts: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct Record {
    scene: Scene,
    caption: String,
    caption_ids: Vec<usize>,
    qa: Vec<QaPair>,
}

/// Writes `manifest.json` plus one directory per split holding
/// `samples.jsonl` and `images/<id>.tnsr`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let vocab = Vocab::new();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        seed: ds.seed,
        n_scenes: ds.n_scenes,
        split_spec: ds.spec.clone(),
        vocab_size: vocab.len(),
        counts: [ds.train.len(), ds.val.len(), ds.test.len()],
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        let idir = sdir.join("images");
        fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
        let mut lines = Vec::new();
        for s in ds.split(split) {
            let rec = Record {
                scene: s.scene.clone(),
                caption: vocab.detokenize(&s.caption_ids)?,
                caption_ids: s.caption_ids.clone(),
                qa: s.qa.clone(),
            };
            serde_json::to_writer(&mut lines, &rec)?;
            lines.push(b'\n');
            write_tensor(&idir.join(format!("{:06}.tnsr", s.scene.id)), &s.image)?;
        }
        let p = sdir.join("samples.jsonl");
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(&lines).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let mut ds =
        Dataset { seed: m.seed, n_scenes: m.n_scenes, spec: m.split_spec, train: vec![], val: vec![], test: vec![] };
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        let p = sdir.join("samples.jsonl");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: Record = serde_json::from_str(line)?;
            let image = read_tensor(&sdir.join("images").join(format!("{:06}.tnsr", r.scene.id)))?;
            out.push(Sample { scene: r.scene, image, caption_ids: r.caption_ids, qa: r.qa });
        }
        match split {
            Split::Train => ds.train = out,
            Split::Val => ds.val = out,
            Split::Test => ds.test = out,
        }
    }
    Ok(ds)
}
