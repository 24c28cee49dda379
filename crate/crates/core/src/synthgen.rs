//! Seeded synthetic event images in which importance is relational.
//!
//! Each image belongs to one of `contexts` scene types. A scene has a centroid
//! and a prominence direction; directions come in opposite pairs, so no single
//! global direction marks the important person. Every person of an image is
//! drawn around a shared context vector, and in non-noise images exactly one
//! person is pushed `prominence_gap` along the scene's direction. Telling who
//! stands out therefore requires looking at the rest of the group.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{parse_value, KeyValueTarget};
use crate::dataset::{Dataset, EventImage, PersonInstance};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    pub people_min: usize,
    pub people_max: usize,
    /// Fraction of unlabelled images without an important person.
    pub noise_fraction: f64,
    pub prominence_gap: f64,
    pub feature_noise: f64,
    /// Number of scene types; must be even (directions come in opposite pairs).
    pub contexts: usize,
    /// Standard deviation of scene-pair centres.
    pub context_spread: f64,
    /// Distance between the centroids of two scenes with opposite directions.
    pub pair_separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_labelled: 200,
            n_unlabelled: 2000,
            n_val: 100,
            n_test: 500,
            dim: 8,
            people_min: 2,
            people_max: 12,
            noise_fraction: 0.1,
            prominence_gap: 1.5,
            feature_noise: 0.5,
            contexts: 8,
            context_spread: 2.0,
            pair_separation: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::invalid(format!(
                "noise_fraction must lie in [0, 1), got {}",
                self.noise_fraction
            )));
        }
        if self.people_min > self.people_max {
            return Err(Error::invalid(format!(
                "people range is inverted: ({}, {})",
                self.people_min, self.people_max
            )));
        }
        if self.people_min < 2 {
            return Err(Error::invalid("images need at least two persons"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if self.contexts == 0 || !self.contexts.is_multiple_of(2) {
            return Err(Error::invalid(format!("contexts must be a positive even number, got {}", self.contexts)));
        }
        if !(self.prominence_gap > 0.0) {
            return Err(Error::invalid("prominence_gap must be positive"));
        }
        if !(self.feature_noise >= 0.0) || !(self.context_spread >= 0.0) || !(self.pair_separation >= 0.0) {
            return Err(Error::invalid("noise and spread must be non-negative"));
        }
        Ok(())
    }

    /// Number of unlabelled images generated without an important person.
    pub fn noise_count(&self) -> usize {
        (self.noise_fraction * self.n_unlabelled as f64).round() as usize
    }
}

impl KeyValueTarget for SynthSpec {
    const KEYS: &'static [&'static str] = &[
        "n_labelled",
        "n_unlabelled",
        "n_val",
        "n_test",
        "dim",
        "people_min",
        "people_max",
        "noise_fraction",
        "prominence_gap",
        "feature_noise",
        "contexts",
        "context_spread",
        "pair_separation",
        "seed",
    ];

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_labelled" => self.n_labelled = parse_value(key, value)?,
            "n_unlabelled" => self.n_unlabelled = parse_value(key, value)?,
            "n_val" => self.n_val = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "people_min" => self.people_min = parse_value(key, value)?,
            "people_max" => self.people_max = parse_value(key, value)?,
            "noise_fraction" => self.noise_fraction = parse_value(key, value)?,
            "prominence_gap" => self.prominence_gap = parse_value(key, value)?,
            "feature_noise" => self.feature_noise = parse_value(key, value)?,
            "contexts" => self.contexts = parse_value(key, value)?,
            "context_spread" => self.context_spread = parse_value(key, value)?,
            "pair_separation" => self.pair_separation = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Self::unknown_key(key)),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData<T> {
    pub labelled: Dataset<T>,
    pub unlabelled: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
    /// Unlabelled image id -> generated without an important person.
    pub noise_flags: BTreeMap<String, bool>,
}

impl<T: Scalar> SynthData<T> {
    pub const FILES: [&'static str; 5] = [
        "labelled.jsonl",
        "unlabelled.jsonl",
        "val.jsonl",
        "test.jsonl",
        "noise.csv",
    ];

    /// Writes the four JSON-Lines datasets and the noise-flag CSV into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (ds, name) in [
            (&self.labelled, Self::FILES[0]),
            (&self.unlabelled, Self::FILES[1]),
            (&self.val, Self::FILES[2]),
            (&self.test, Self::FILES[3]),
        ] {
            ds.save(dir.join(name))?;
        }
        let mut w = BufWriter::new(File::create(dir.join(Self::FILES[4]))?);
        write_noise_csv(&mut w, &self.noise_flags)?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_noise_csv<W: Write>(mut w: W, flags: &BTreeMap<String, bool>) -> Result<()> {
    writeln!(w, "image_id,is_noise")?;
    for (id, &noise) in flags {
        writeln!(w, "{id},{}", u8::from(noise))?;
    }
    Ok(())
}

/// Parses a noise-flag CSV written by [`write_noise_csv`].
pub fn read_noise_csv(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, flag) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `image_id,is_noise`".into(),
        })?;
        let flag = match flag.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("is_noise must be 0 or 1, got {other:?}"),
                })
            }
        };
        out.insert(id.to_string(), flag);
    }
    Ok(out)
}

struct Scene {
    centroid: Vec<f64>,
    direction: Vec<f64>,
}

// splitmix64 finaliser, used to give every image its own stream.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn scenes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let mut out = Vec::with_capacity(spec.contexts);
    for _ in 0..spec.contexts / 2 {
        let mut dir = normal_vec(rng, spec.dim, 1.0);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= norm);
        let neg: Vec<f64> = dir.iter().map(|v| -v).collect();
        let centre = normal_vec(rng, spec.dim, spec.context_spread);
        let mut offset = normal_vec(rng, spec.dim, 1.0);
        let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        offset.iter_mut().for_each(|v| *v *= 0.5 * spec.pair_separation / norm);
        out.push(Scene {
            centroid: centre.iter().zip(&offset).map(|(c, o)| c + o).collect(),
            direction: dir,
        });
        out.push(Scene {
            centroid: centre.iter().zip(&offset).map(|(c, o)| c - o).collect(),
            direction: neg,
        });
    }
    out
}

fn make_image<T: Scalar>(
    spec: &SynthSpec,
    scenes: &[Scene],
    id: String,
    stream: u64,
    labelled: bool,
    noise: bool,
) -> EventImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let n = rng.random_range(spec.people_min..=spec.people_max);
    let scene = &scenes[rng.random_range(0..scenes.len())];
    let context: Vec<f64> = scene
        .centroid
        .iter()
        .zip(normal_vec(&mut rng, spec.dim, spec.feature_noise))
        .map(|(c, j)| c + j)
        .collect();
    let important = rng.random_range(0..n);
    let persons = (0..n)
        .map(|j| {
            let mut x: Vec<f64> = context
                .iter()
                .zip(normal_vec(&mut rng, spec.dim, spec.feature_noise))
                .map(|(c, e)| c + e)
                .collect();
            let is_important = !noise && j == important;
            if is_important {
                for (v, d) in x.iter_mut().zip(&scene.direction) {
                    *v += spec.prominence_gap * d;
                }
            }
            PersonInstance {
                features: x.into_iter().map(T::lit).collect(),
                label: labelled.then_some(is_important),
            }
        })
        .collect();
    EventImage { id, labelled, persons }
}

/// Generates labelled, unlabelled, validation and test pools.
pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<SynthData<T>> {
    spec.validate()?;
    let mut world = ChaCha8Rng::seed_from_u64(mix(spec.seed ^ 0x5eed_0f5c_e4e5));
    let scenes = scenes(spec, &mut world);
    let mut is_noise = vec![false; spec.n_unlabelled];
    for i in index::sample(&mut world, spec.n_unlabelled, spec.noise_count()) {
        is_noise[i] = true;
    }

    let split = |tag: u64, prefix: &str, count: usize, labelled: bool, noise: &dyn Fn(usize) -> bool| {
        let images = (0..count)
            .map(|i| {
                let stream = mix(mix(spec.seed) ^ mix(tag << 32 | i as u64));
                make_image::<T>(spec, &scenes, format!("{prefix}-{i:05}"), stream, labelled, noise(i))
            })
            .collect();
        Dataset::new(images, spec.dim)
    };
    let never = |_: usize| false;
    let labelled = split(1, "lab", spec.n_labelled, true, &never)?;
    let unlabelled = split(2, "unl", spec.n_unlabelled, false, &|i| is_noise[i])?;
    let val = split(3, "val", spec.n_val, true, &never)?;
    let test = split(4, "test", spec.n_test, true, &never)?;
    let noise_flags = unlabelled
        .images()
        .iter()
        .zip(&is_noise)
        .map(|(img, &f)| (img.id.clone(), f))
        .collect();
    Ok(SynthData {
        labelled,
        unlabelled,
        val,
        test,
        noise_flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_labelled: 20,
            n_unlabelled: 50,
            n_val: 5,
            n_test: 10,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn no_noise_means_no_flags() {
        let d = generate::<f64>(&SynthSpec { noise_fraction: 0.0, ..small(1) }).unwrap();
        assert_eq!(d.noise_flags.len(), 50);
        assert!(d.noise_flags.values().all(|&f| !f));
    }

    #[test]
    fn noise_count_is_exact() {
        let spec = SynthSpec {
            n_labelled: 200,
            n_unlabelled: 2000,
            noise_fraction: 0.1,
            seed: 3,
            n_val: 0,
            n_test: 0,
            ..SynthSpec::default()
        };
        let d = generate::<f64>(&spec).unwrap();
        assert_eq!(d.noise_flags.values().filter(|&&f| f).count(), 200);
        assert_eq!(d.unlabelled.len(), 2000);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate::<f64>(&small(5)).unwrap();
        let b = generate::<f64>(&small(5)).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.test.to_writer(&mut buf_a).unwrap();
        b.test.to_writer(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        assert_ne!(a, generate::<f64>(&small(6)).unwrap());
    }

    #[test]
    fn labelled_pools_have_one_important_person() {
        let d = generate::<f64>(&small(2)).unwrap();
        for ds in [&d.labelled, &d.val, &d.test] {
            for img in ds.images() {
                assert_eq!(img.important_indices().len(), 1);
                assert!((2..=12).contains(&img.len()));
            }
        }
        assert!(d.unlabelled.images().iter().all(|i| !i.labelled));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate::<f64>(&SynthSpec { noise_fraction: 1.0, ..small(0) }).is_err());
        assert!(generate::<f64>(&SynthSpec { people_min: 5, people_max: 3, ..small(0) }).is_err());
        assert!(generate::<f64>(&SynthSpec { contexts: 3, ..small(0) }).is_err());
    }

    #[test]
    fn noise_csv_round_trip() {
        let d = generate::<f64>(&small(4)).unwrap();
        let mut buf = Vec::new();
        write_noise_csv(&mut buf, &d.noise_flags).unwrap();
        assert_eq!(read_noise_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), d.noise_flags);
    }
}
