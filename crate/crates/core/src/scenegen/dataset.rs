use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::container::{read_sample_file, write_sample_file};
use super::{render_scene, LightRig, SceneObject, SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::imaging::{validate_sample, Sample, SampleMeta};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_VERSION: u32 = 1;

struct ClassKind {
    name: &'static str,
    shape: Shape,
    albedo: [f32; 3],
}

const KINDS: [ClassKind; 8] = [
    ClassKind { name: "ground", shape: Shape::GroundPlane, albedo: [0.36, 0.42, 0.20] },
    ClassKind { name: "bush", shape: Shape::Sphere, albedo: [0.18, 0.40, 0.14] },
    ClassKind { name: "hedge", shape: Shape::Box, albedo: [0.14, 0.33, 0.12] },
    ClassKind { name: "trunk", shape: Shape::Cylinder, albedo: [0.40, 0.27, 0.15] },
    ClassKind { name: "fence", shape: Shape::Box, albedo: [0.68, 0.66, 0.60] },
    ClassKind { name: "rock", shape: Shape::Sphere, albedo: [0.50, 0.49, 0.46] },
    ClassKind { name: "pot", shape: Shape::Cylinder, albedo: [0.62, 0.33, 0.20] },
    ClassKind { name: "path", shape: Shape::Box, albedo: [0.72, 0.66, 0.50] },
];

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| match KINDS.get(c) {
            Some(k) => k.name.to_string(),
            None => format!("class{c}"),
        })
        .collect()
}

fn class_albedo(class_id: usize) -> [f32; 3] {
    let base = KINDS[class_id % KINDS.len()].albedo;
    let round = class_id / KINDS.len();
    if round == 0 {
        return base;
    }
    // extra classes reuse a palette entry with rotated channels and a shift
    let shift = 0.07 * round as f32;
    let r = round % 3;
    [base[r], base[(r + 1) % 3], base[(r + 2) % 3]].map(|a| ((a + shift) % 0.9).max(0.05))
}

/// Builds a random scene: ground plane, 6–12 objects and `num_rigs` light rigs.
pub fn random_scene(
    seed: u64,
    num_classes: usize,
    height: usize,
    width: usize,
    num_rigs: usize,
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (height.min(width) as f64 / 96.0).max(0.1);
    let jitter = |rng: &mut ChaCha8Rng, a: [f32; 3]| {
        a.map(|v| (v + rng.random_range(-0.05f32..0.05)).clamp(0.05, 0.95))
    };

    let ground_albedo = jitter(&mut rng, KINDS[0].albedo);
    let mut ground = SceneObject::ground(0, ground_albedo);
    ground.texture = 0.10;
    let mut objects = vec![ground];

    let count = rng.random_range(6..=12);
    let mut drafts = Vec::with_capacity(count);
    for _ in 0..count {
        if num_classes < 2 {
            break;
        }
        drafts.push(rng.random_range(1..num_classes));
    }
    // flat paths go underneath everything else
    drafts.sort_by_key(|&c| c % KINDS.len() != 7);

    for class_id in drafts {
        let kind = &KINDS[class_id % KINDS.len()];
        let albedo = jitter(&mut rng, class_albedo(class_id));
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let orientation = rng.random_range(0.0..std::f64::consts::PI);
        let mut obj = SceneObject {
            shape: kind.shape,
            class_id: class_id as u8,
            albedo,
            position: [cx, cy, 0.0],
            size: [0.0; 3],
            orientation,
            tilt: [0.0; 2],
            texture: 0.0,
        };
        match class_id % KINDS.len() {
            1 => {
                let r = rng.random_range(5.0..12.0) * scale;
                obj.size = [r, r, r];
                obj.texture = 0.15;
            }
            2 => {
                obj.size = [
                    rng.random_range(6.0..16.0) * scale,
                    rng.random_range(3.0..6.0) * scale,
                    rng.random_range(6.0..10.0) * scale,
                ];
                obj.tilt = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
                obj.texture = 0.12;
            }
            3 => {
                let r = rng.random_range(2.5..4.5) * scale;
                obj.size = [r, rng.random_range(10.0..22.0) * scale, r];
                obj.position[2] = r;
                obj.texture = 0.08;
            }
            4 => {
                obj.size = [
                    rng.random_range(12.0..25.0) * scale,
                    rng.random_range(1.0..2.0) * scale,
                    rng.random_range(8.0..12.0) * scale,
                ];
                obj.tilt = [0.0, rng.random_range(-0.8..0.8)];
            }
            5 => {
                let r = rng.random_range(4.0..9.0) * scale;
                obj.size = [r, r, r * rng.random_range(0.5..0.8)];
                obj.texture = 0.06;
            }
            6 => {
                let r = rng.random_range(4.0..6.0) * scale;
                obj.size = [r, rng.random_range(4.0..7.0) * scale, r];
                obj.position[2] = r;
            }
            7 => {
                obj.size = [
                    rng.random_range(20.0..40.0) * scale,
                    rng.random_range(3.0..6.0) * scale,
                    0.2,
                ];
                obj.texture = 0.05;
            }
            _ => unreachable!("class 0 is the ground plane"),
        }
        objects.push(obj);
    }

    let light_rigs = (0..num_rigs)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = rng.random_range(15f64..85.0).to_radians();
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let ambient = rng.random_range(0.0..=0.5);
            let intensity = rng.random_range(0.3..=1.5);
            LightRig::new(dir, ambient, intensity).expect("rig parameters drawn in range")
        })
        .collect();

    let camera_offset = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    SceneSpec {
        seed,
        num_classes,
        height,
        width,
        objects,
        light_rigs,
        camera_offset,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleEntry {
    pub sample_id: u32,
    pub split: Split,
    pub scene_id: u32,
    pub rig_id: u32,
    pub filename: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub master_seed: u64,
    pub num_scenes: usize,
    pub rigs_per_scene: usize,
    /// Pixel count per class over all samples.
    pub class_pixels: Vec<u64>,
    /// Pixel count per class over the training split only.
    pub train_class_pixels: Vec<u64>,
    pub entries: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let train_scenes = self.scenes(Split::Train).len();
        let test_scenes = self.scenes(Split::Test).len();
        let _ = writeln!(s, "format_version={}", self.format_version);
        let _ = writeln!(s, "num_samples={}", self.num_samples);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "class_names={}", self.class_names.join(","));
        let _ = writeln!(s, "master_seed={}", self.master_seed);
        let _ = writeln!(s, "num_scenes={}", self.num_scenes);
        let _ = writeln!(s, "rigs_per_scene={}", self.rigs_per_scene);
        let _ = writeln!(s, "train_scenes={train_scenes}");
        let _ = writeln!(s, "test_scenes={test_scenes}");
        let _ = writeln!(s, "class_pixels={}", join(&self.class_pixels));
        let _ = writeln!(s, "train_class_pixels={}", join(&self.train_class_pixels));
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                e.sample_id,
                e.split.as_str(),
                e.scene_id,
                e.rig_id,
                e.filename
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("manifest: {msg}"));
        let mut header = std::collections::BTreeMap::new();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if entries.is_empty() {
                if let Some((k, v)) = line.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                    continue;
                }
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields", lineno + 1)));
            }
            let num = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| bad(format!("line {}: bad number {s:?}", lineno + 1)))
            };
            entries.push(SampleEntry {
                sample_id: num(f[0])?,
                split: Split::parse(f[1])?,
                scene_id: num(f[2])?,
                rig_id: num(f[3])?,
                filename: f[4].to_string(),
            });
        }
        let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse::<u64>()
                .map_err(|_| bad(format!("key {k} is not a number")))
        };
        let list = |k: &str| -> Result<Vec<u64>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse::<u64>().map_err(|_| bad(format!("key {k}: bad entry {x:?}"))))
                .collect()
        };
        let format_version = num("format_version")? as u32;
        if format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {format_version}")));
        }
        let m = Self {
            format_version,
            num_samples: num("num_samples")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            num_classes: num("num_classes")? as usize,
            class_names: get("class_names")?.split(',').map(str::to_string).collect(),
            master_seed: num("master_seed")?,
            num_scenes: num("num_scenes")? as usize,
            rigs_per_scene: num("rigs_per_scene")? as usize,
            class_pixels: list("class_pixels")?,
            train_class_pixels: list("train_class_pixels")?,
            entries,
        };
        if m.entries.len() != m.num_samples {
            return Err(bad(format!(
                "num_samples={} but {} sample lines",
                m.num_samples,
                m.entries.len()
            )));
        }
        if m.class_names.len() != m.num_classes
            || m.class_pixels.len() != m.num_classes
            || m.train_class_pixels.len() != m.num_classes
        {
            return Err(bad("per-class lists do not match num_classes".into()));
        }
        Ok(m)
    }

    pub fn scenes(&self, split: Split) -> Vec<u32> {
        let mut s: Vec<u32> = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scene_id)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Per-class pixel frequency over the training split.
    pub fn train_class_frequencies(&self) -> Vec<f64> {
        let total: u64 = self.train_class_pixels.iter().sum();
        self.train_class_pixels
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub rigs_per_scene: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 40,
            rigs_per_scene: 5,
            num_classes: 8,
            height: 96,
            width: 128,
            master_seed: 1,
        }
    }
}

/// Per-scene seeds and the scene-level train/test assignment.
fn plan(cfg: &GenConfig) -> (Vec<u64>, Vec<Split>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let seeds: Vec<u64> = (0..cfg.num_scenes).map(|_| rng.random()).collect();
    let n_test = ((cfg.num_scenes as f64 * 0.2).round() as usize).clamp(1, cfg.num_scenes - 1);
    let mut order: Vec<usize> = (0..cfg.num_scenes).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; cfg.num_scenes];
    for &s in &order[..n_test] {
        splits[s] = Split::Test;
    }
    (seeds, splits)
}

/// Renders `num_scenes × rigs_per_scene` samples into `out_dir` and writes the manifest last.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.num_scenes < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 scenes for a scene split, got {}",
            cfg.num_scenes
        )));
    }
    if cfg.rigs_per_scene == 0 {
        return Err(Error::Invalid("rigs_per_scene must be positive".into()));
    }
    if cfg.num_classes == 0 || cfg.num_classes > 256 {
        return Err(Error::Invalid(format!(
            "num_classes must be in 1..=256, got {}",
            cfg.num_classes
        )));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Invalid("canvas must be non-empty".into()));
    }
    let (seeds, splits) = plan(cfg);

    let rendered: Vec<Vec<Sample>> = seeds
        .par_iter()
        .enumerate()
        .map(|(scene, &seed)| {
            let spec = random_scene(seed, cfg.num_classes, cfg.height, cfg.width, cfg.rigs_per_scene);
            (0..cfg.rigs_per_scene)
                .map(|rig| {
                    let mut s = render_scene(&spec, rig)?;
                    s.meta = SampleMeta {
                        scene_id: scene as u32,
                        rig_id: rig as u32,
                        camera_id: scene as u32,
                    };
                    let violations = validate_sample(&s, 1e-6);
                    if let Some(v) = violations.first() {
                        return Err(Error::Invalid(format!(
                            "scene {scene} rig {rig} failed validation: {v}"
                        )));
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir)?;
    let mut entries = Vec::new();
    let mut class_pixels = vec![0u64; cfg.num_classes];
    let mut train_class_pixels = vec![0u64; cfg.num_classes];
    for (scene, samples) in rendered.iter().enumerate() {
        for s in samples {
            let id = entries.len() as u32;
            let filename = format!("samples/{id:05}.iseg");
            write_sample_file(&out_dir.join(&filename), s)?;
            for &l in s.labels.data() {
                class_pixels[l as usize] += 1;
                if splits[scene] == Split::Train {
                    train_class_pixels[l as usize] += 1;
                }
            }
            entries.push(SampleEntry {
                sample_id: id,
                split: splits[scene],
                scene_id: s.meta.scene_id,
                rig_id: s.meta.rig_id,
                filename,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        num_samples: entries.len(),
        height: cfg.height,
        width: cfg.width,
        num_classes: cfg.num_classes,
        class_names: class_names(cfg.num_classes),
        master_seed: cfg.master_seed,
        num_scenes: cfg.num_scenes,
        rigs_per_scene: cfg.rigs_per_scene,
        class_pixels,
        train_class_pixels,
        entries,
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// A dataset directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest: DatasetManifest::parse(&text)?,
    })
}

impl Dataset {
    pub fn load_entry(&self, e: &SampleEntry) -> Result<Sample> {
        let meta = SampleMeta {
            scene_id: e.scene_id,
            rig_id: e.rig_id,
            camera_id: e.scene_id,
        };
        let s = read_sample_file(&self.dir.join(&e.filename), self.manifest.num_classes, meta)?;
        if s.image.height() != self.manifest.height || s.image.width() != self.manifest.width {
            return Err(Error::Dataset(format!(
                "{}: {}x{} does not match manifest {}x{}",
                e.filename,
                s.image.height(),
                s.image.width(),
                self.manifest.height,
                self.manifest.width
            )));
        }
        Ok(s)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest
            .entries(split)
            .map(|e| self.load_entry(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_scenes: usize, rigs: usize) -> GenConfig {
        GenConfig {
            num_scenes,
            rigs_per_scene: rigs,
            height: 16,
            width: 24,
            ..GenConfig::default()
        }
    }

    #[test]
    fn minimal_dataset_splits_one_and_one() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(2, 1), dir.path()).unwrap();
        assert_eq!(m.num_samples, 2);
        assert_eq!(m.entries(Split::Train).count(), 1);
        assert_eq!(m.entries(Split::Test).count(), 1);
    }

    #[test]
    fn default_proportions_are_eighty_twenty_by_scene() {
        let (_, splits) = plan(&GenConfig::default());
        let test = splits.iter().filter(|&&s| s == Split::Test).count();
        assert_eq!(test, 8);
        assert_eq!(splits.len() * 5, 200);
    }

    #[test]
    fn single_scene_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&small(1, 3), dir.path()).is_err());
    }

    #[test]
    fn manifest_round_trips_and_counts_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(5, 2), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let parsed = DatasetManifest::parse(&text).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.to_text(), text);
        assert_eq!(m.class_pixels.iter().sum::<u64>(), 10 * 16 * 24);
        let train = m.entries(Split::Train).count() as u64;
        assert_eq!(m.train_class_pixels.iter().sum::<u64>(), train * 16 * 24);
    }

    #[test]
    fn scene_split_has_no_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(7, 3), dir.path()).unwrap();
        let train = m.scenes(Split::Train);
        let test = m.scenes(Split::Test);
        assert!(train.iter().all(|s| !test.contains(s)));
        assert_eq!(train.len() + test.len(), 7);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&small(3, 2), a.path()).unwrap();
        generate_dataset(&small(3, 2), b.path()).unwrap();
        for e in &ma.entries {
            assert_eq!(
                fs::read(a.path().join(&e.filename)).unwrap(),
                fs::read(b.path().join(&e.filename)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn manifest_parse_rejects_garbage() {
        assert!(DatasetManifest::parse("format_version=1\n").is_err());
        assert!(DatasetManifest::parse("format_version=9\n").is_err());
    }
}
