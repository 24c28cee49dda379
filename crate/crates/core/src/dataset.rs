//! Event images, persons, and the JSON-Lines dataset format.
//!
//! One image per line:
//!
//! ```text
//! {"id": "img-0", "labelled": true, "persons": [{"features": [0.1, 0.2], "importance": 1}, ...]}
//! ```
//!
//! `importance` is `0`/`1` on every person of a labelled image and `null` on
//! every person of an unlabelled one.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct PersonInstance<T> {
    pub features: Vec<T>,
    /// `Some(true)` for important, `Some(false)` for non-important, `None` when unlabelled.
    pub label: Option<bool>,
}

impl<T> PersonInstance<T> {
    pub fn labelled(features: Vec<T>, important: bool) -> Self {
        Self {
            features,
            label: Some(important),
        }
    }

    pub fn unlabelled(features: Vec<T>) -> Self {
        Self {
            features,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventImage<T> {
    pub id: String,
    pub labelled: bool,
    pub persons: Vec<PersonInstance<T>>,
}

impl<T: Scalar> EventImage<T> {
    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    /// Feature vectors in person order.
    pub fn features(&self) -> Vec<&[T]> {
        self.persons.iter().map(|p| p.features.as_slice()).collect()
    }

    /// Ground-truth labels, `None` for unlabelled images.
    pub fn labels(&self) -> Option<Vec<bool>> {
        if !self.labelled {
            return None;
        }
        self.persons.iter().map(|p| p.label).collect()
    }

    /// Indices of persons labelled important.
    pub fn important_indices(&self) -> Vec<usize> {
        self.persons
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == Some(true))
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy of the image with every label removed.
    pub fn without_labels(&self) -> Self {
        Self {
            id: self.id.clone(),
            labelled: false,
            persons: self
                .persons
                .iter()
                .map(|p| PersonInstance::unlabelled(p.features.clone()))
                .collect(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.persons.is_empty() {
            return Err(Error::EmptyImage(self.id.clone()));
        }
        for (j, p) in self.persons.iter().enumerate() {
            if p.features.len() != dim {
                return Err(Error::dims(
                    dim,
                    p.features.len(),
                    format!("image {:?}, person {j}", self.id),
                ));
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "image {:?}, person {j} has a non-finite feature",
                    self.id
                )));
            }
            if p.label.is_some() != self.labelled {
                return Err(Error::Validation(format!(
                    "image {:?}, person {j}: importance must be {} on a {} image",
                    self.id,
                    if self.labelled { "0 or 1" } else { "null" },
                    if self.labelled { "labelled" } else { "unlabelled" },
                )));
            }
        }
        if self.labelled && !self.persons.iter().any(|p| p.label == Some(true)) {
            return Err(Error::Validation(format!(
                "labelled image {:?} has no important person",
                self.id
            )));
        }
        Ok(())
    }
}

/// Validated collection of images sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Vec<EventImage<T>>,
    feature_dim: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<EventImage<T>>, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        let mut seen = HashSet::with_capacity(images.len());
        for img in &images {
            img.validate(feature_dim)?;
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Validation(format!("duplicate image id {:?}", img.id)));
            }
        }
        Ok(Self {
            images,
            feature_dim,
        })
    }

    /// Infers the feature dimension from the first person. Empty input yields an error.
    pub fn from_images(images: Vec<EventImage<T>>) -> Result<Self> {
        let dim = images
            .iter()
            .flat_map(|i| i.persons.first())
            .map(|p| p.features.len())
            .next()
            .ok_or_else(|| Error::invalid("cannot infer feature dimension from an empty image list"))?;
        Self::new(images, dim)
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            images: Vec::new(),
            feature_dim,
        }
    }

    pub fn images(&self) -> &[EventImage<T>] {
        &self.images
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labelled_count(&self) -> usize {
        self.images.iter().filter(|i| i.labelled).count()
    }

    pub fn into_images(self) -> Vec<EventImage<T>> {
        self.images
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        for img in &self.images {
            let rec = ImageRecord {
                id: img.id.clone(),
                labelled: img.labelled,
                persons: img
                    .persons
                    .iter()
                    .map(|p| PersonRecord {
                        features: p.features.iter().map(|v| v.as_f64()).collect(),
                        importance: p.label.map(u8::from),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(BufWriter::new(File::create(path)?))
    }

    /// Parses JSON-Lines. Blank lines are skipped; line numbers in errors are 1-based.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut images = Vec::new();
        let mut dim: Option<usize> = None;
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let img = rec.into_image::<T>(line_no)?;
            let d = *dim.get_or_insert_with(|| img.persons.first().map_or(0, |p| p.features.len()));
            img.validate(d).map_err(|e| at_line(e, line_no))?;
            images.push(img);
        }
        let dim = dim.ok_or(Error::Parse {
            line: 0,
            message: "dataset file contains no images".into(),
        })?;
        Self::new(images, dim)
    }
}

/// Reads and validates a JSON-Lines dataset file.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    Dataset::from_reader(BufReader::new(File::open(path)?))
}

/// Splits `d` into a labelled pool holding `floor(fraction * #labelled)` of its
/// labelled images and an unlabelled pool holding everything else with labels
/// stripped. Relative order of the input is kept within each output.
pub fn split_dataset<T: Scalar>(
    d: &Dataset<T>,
    labelled_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "labelled fraction must lie in (0, 1], got {labelled_fraction}"
        )));
    }
    let labelled: Vec<usize> = (0..d.len()).filter(|&i| d.images[i].labelled).collect();
    if labelled.is_empty() {
        return Err(Error::invalid("dataset has no labelled images to split"));
    }
    // Small epsilon so that e.g. 0.33 * 100 keeps 33 despite binary rounding.
    let keep = ((labelled_fraction * labelled.len() as f64) + 1e-9).floor() as usize;
    let mut order = labelled.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut kept = vec![false; d.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }

    let mut lab = Vec::with_capacity(keep);
    let mut unl = Vec::with_capacity(d.len() - keep);
    for (i, img) in d.images.iter().enumerate() {
        if kept[i] {
            lab.push(img.clone());
        } else if img.labelled {
            unl.push(img.without_labels());
        } else {
            unl.push(img.clone());
        }
    }
    Ok((
        Dataset {
            images: lab,
            feature_dim: d.feature_dim,
        },
        Dataset {
            images: unl,
            feature_dim: d.feature_dim,
        },
    ))
}

fn at_line(e: Error, line: usize) -> Error {
    match e {
        Error::Parse { .. } | Error::Io(_) => e,
        other => Error::Parse {
            line,
            message: other.to_string(),
        },
    }
}

#[derive(Serialize, Deserialize)]
struct PersonRecord {
    features: Vec<f64>,
    importance: Option<u8>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    labelled: bool,
    persons: Vec<PersonRecord>,
}

impl ImageRecord {
    fn into_image<T: Scalar>(self, line: usize) -> Result<EventImage<T>> {
        let persons = self
            .persons
            .into_iter()
            .map(|p| {
                let label = match p.importance {
                    None => None,
                    Some(0) => Some(false),
                    Some(1) => Some(true),
                    Some(v) => {
                        return Err(Error::Parse {
                            line,
                            message: format!("importance must be 0, 1 or null, got {v}"),
                        })
                    }
                };
                Ok(PersonInstance {
                    features: p.features.into_iter().map(T::lit).collect(),
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EventImage {
            id: self.id,
            labelled: self.labelled,
            persons,
        })
    }
}
