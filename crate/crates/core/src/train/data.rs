use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::Sample;
use crate::metrics::image_tensor;
use crate::nn::{load_checkpoint, Head, InputSource, Network, Tensor};

/// Predictions from an upstream model standing in for ground truth in a cascade.
#[derive(Debug, Clone)]
pub enum CascadeAux {
    /// `3 × H × W` reflectance per sample.
    Albedo(Vec<Tensor>),
    /// `H × W` labels per sample.
    Labels(Vec<Vec<u8>>),
}

/// Builds the `C_in × H × W` network input for one sample.
///
/// `aux` replaces the ground-truth albedo or labels when the input source needs them.
pub fn input_tensor(sample: &Sample, source: InputSource, aux: Option<&CascadeAux>, index: usize) -> Result<Tensor> {
    let (h, w) = (sample.image.height(), sample.image.width());
    match source {
        InputSource::Rgb => Ok(image_tensor(&sample.image)),
        InputSource::Albedo => match aux {
            Some(CascadeAux::Albedo(v)) => Ok(v[index].clone()),
            Some(CascadeAux::Labels(_)) => Err(Error::Config("albedo input needs an albedo-predicting cascade source".into())),
            None => Ok(image_tensor(&sample.reflectance)),
        },
        InputSource::RgbLabels => {
            let labels = match aux {
                Some(CascadeAux::Labels(v)) => &v[index][..],
                Some(CascadeAux::Albedo(_)) => {
                    return Err(Error::Config("label input needs a segmentation cascade source".into()))
                }
                None => sample.labels.data(),
            };
            let c = sample.labels.num_classes();
            let scale = if c > 1 { 1.0 / (c - 1) as f64 } else { 0.0 };
            let mut data: Vec<f64> = sample.image.data().iter().map(|&v| v as f64).collect();
            data.extend(labels.iter().map(|&l| l as f64 * scale));
            Tensor::new(vec![4, h, w], data)
        }
    }
}

/// Per-sample inputs and targets of one split, ready for batching.
pub struct PreparedSplit {
    pub ids: Vec<usize>,
    pub samples: Vec<Sample>,
    pub inputs: Vec<Tensor>,
    pub reflectance: Vec<Tensor>,
    pub shading: Vec<Tensor>,
}

impl PreparedSplit {
    pub fn new(ids: Vec<usize>, samples: Vec<Sample>, source: InputSource, aux: Option<&CascadeAux>) -> Result<Self> {
        let inputs = samples
            .iter()
            .enumerate()
            .map(|(i, s)| input_tensor(s, source, aux, i))
            .collect::<Result<_>>()?;
        let reflectance = samples.iter().map(|s| image_tensor(&s.reflectance)).collect();
        let shading = samples.iter().map(|s| image_tensor(&s.shading)).collect();
        Ok(Self { ids, samples, inputs, reflectance, shading })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.ids.truncate(n);
        self.samples.truncate(n);
        self.inputs.truncate(n);
        self.reflectance.truncate(n);
        self.shading.truncate(n);
    }

    pub fn batch_inputs(&self, idx: &[usize]) -> Result<Tensor> {
        stack(&self.inputs, idx)
    }

    pub fn batch_reflectance(&self, idx: &[usize]) -> Result<Tensor> {
        stack(&self.reflectance, idx)
    }

    pub fn batch_shading(&self, idx: &[usize]) -> Result<Tensor> {
        stack(&self.shading, idx)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.samples[i].labels.data().iter().copied()).collect()
    }
}

fn stack(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<Tensor> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack(&picked)
}

/// Evaluation-mode batch size for inference passes.
pub const INFER_BATCH: usize = 8;

/// Runs `net` over RGB inputs of `samples` to produce the cascade input `source` needs.
pub fn cascade_predictions(net: &Network, samples: &[Sample], source: InputSource) -> Result<CascadeAux> {
    if net.spec.input_source != InputSource::Rgb {
        return Err(Error::Checkpoint(format!(
            "cascade source must take rgb input, found {}",
            net.spec.input_source.name()
        )));
    }
    let need = match source {
        InputSource::Albedo => Head::Reflectance,
        InputSource::RgbLabels => Head::Segmentation,
        InputSource::Rgb => return Err(Error::Config("rgb input has no cascade source".into())),
    };
    if !net.spec.has(need) {
        return Err(Error::Checkpoint(format!("cascade source has no {} head", need.name())));
    }
    let mut albedo = Vec::new();
    let mut labels = Vec::new();
    for chunk in samples.chunks(INFER_BATCH) {
        let x = Tensor::stack(&chunk.iter().map(|s| image_tensor(&s.image)).collect::<Vec<_>>())?;
        let p = net.predict(&x)?;
        for i in 0..chunk.len() {
            match need {
                Head::Reflectance => albedo.push(p.reflectance.as_ref().expect("head present").index0(i)),
                _ => {
                    let l = p.labels.as_ref().expect("head present");
                    let plane = chunk[i].labels.height() * chunk[i].labels.width();
                    labels.push(l[i * plane..(i + 1) * plane].to_vec());
                }
            }
        }
    }
    Ok(match need {
        Head::Reflectance => CascadeAux::Albedo(albedo),
        _ => CascadeAux::Labels(labels),
    })
}

pub fn load_network(path: &Path) -> Result<Network> {
    load_checkpoint(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{Image, LabelMap, SampleMeta};

    fn sample() -> Sample {
        let r = Image::filled(3, 2, 2, 0.5);
        let s = Image::filled(1, 2, 2, 0.8);
        Sample {
            image: crate::imaging::compose(&r, &s).unwrap(),
            reflectance: r,
            shading: s,
            labels: LabelMap::new(2, 2, 5, vec![0, 1, 2, 4]).unwrap(),
            meta: SampleMeta { scene_id: 0, rig_id: 0, camera_id: 0 },
        }
    }

    #[test]
    fn label_plane_is_scaled_to_unit_range() {
        let t = input_tensor(&sample(), InputSource::RgbLabels, None, 0).unwrap();
        assert_eq!(t.shape(), &[4, 2, 2]);
        assert_eq!(&t.data()[12..], &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn albedo_source_uses_reflectance() {
        let t = input_tensor(&sample(), InputSource::Albedo, None, 0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.5));
        let aux = CascadeAux::Albedo(vec![Tensor::full(&[3, 2, 2], 0.1)]);
        let t = input_tensor(&sample(), InputSource::Albedo, Some(&aux), 0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.1));
    }
}
