//! Teacher-output ingestion: one weight-container file per frame holding
//! encoder/decoder feature maps (`enc0..enc4`, `dec0..dec4`) and disparities
//! at four scales (`disp0..disp3`).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::ApxMaps;
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Tensor4};

use super::weights::WeightStore;

/// Teacher maps for a set of frames, keyed by frame id (file stem).
#[derive(Clone, Debug, Default)]
pub struct TeacherBundle<T> {
    pub frames: Vec<(String, ApxMaps<T>)>,
}

fn stack<T: Scalar>(store: &WeightStore, prefix: &str, max: usize) -> Vec<Tensor4<T>> {
    (0..max)
        .map_while(|i| store.tensor::<T>(&format!("{prefix}{i}")).ok())
        .collect()
}

impl<T: Scalar> TeacherBundle<T> {
    /// Frame maps from one container file. Every disparity scale must be
    /// present and finite.
    pub fn frame_from_store(store: &WeightStore) -> Result<ApxMaps<T>> {
        let maps = ApxMaps {
            enc: stack(store, "enc", 5),
            dec: stack(store, "dec", 5),
            disp: stack(store, "disp", 4),
        };
        if maps.disp.len() != 4 {
            return Err(Error::Store(format!(
                "teacher frame holds {} disparity scales, need 4",
                maps.disp.len()
            )));
        }
        for t in maps.enc.iter().chain(maps.dec.iter()).chain(maps.disp.iter()) {
            if !t.all_finite() {
                return Err(Error::Store("teacher maps contain non-finite values".into()));
            }
        }
        Ok(maps)
    }

    /// Write one frame's maps into a container.
    pub fn frame_to_store(maps: &ApxMaps<T>) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for (i, t) in maps.enc.iter().enumerate() {
            store.insert_tensor(format!("enc{i}"), t)?;
        }
        for (i, t) in maps.dec.iter().enumerate() {
            store.insert_tensor(format!("dec{i}"), t)?;
        }
        for (i, t) in maps.disp.iter().enumerate() {
            store.insert_tensor(format!("disp{i}"), t)?;
        }
        Ok(store)
    }

    /// Load every `.sdw` file in a directory as one frame each, sorted by id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "sdw").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Store(format!(
                "no .sdw teacher frames under {}",
                dir.as_ref().display()
            )));
        }
        let mut frames = Vec::new();
        for p in paths {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let store = WeightStore::read_file(&p)?;
            frames.push((id, Self::frame_from_store(&store)?));
        }
        Ok(TeacherBundle { frames })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (id, maps) in &self.frames {
            let store = Self::frame_to_store(maps)?;
            store.write_file(dir.as_ref().join(format!("{id}.sdw")))?;
        }
        Ok(())
    }

    /// Bilinearly resample every teacher map onto the student's dims so the
    /// distillation slots pair up exactly.
    pub fn resize_to(&self, student: &ApxMaps<T>) -> Result<Self> {
        let fit = |ours: &[Tensor4<T>], target: &[Tensor4<T>]| -> Result<Vec<Tensor4<T>>> {
            ours.iter()
                .zip(target.iter())
                .map(|(t, s)| {
                    let [_, _, h, w] = s.dims();
                    if t.dims()[1] != s.dims()[1] {
                        return Err(Error::shape(format!(
                            "teacher channels {} vs student {}",
                            t.dims()[1],
                            s.dims()[1]
                        )));
                    }
                    bilinear_resize(t, h, w)
                })
                .collect()
        };
        let mut frames = Vec::new();
        for (id, maps) in &self.frames {
            frames.push((
                id.clone(),
                ApxMaps {
                    enc: fit(&maps.enc, &student.enc)?,
                    dec: fit(&maps.dec, &student.dec)?,
                    disp: fit(&maps.disp, &student.disp)?,
                },
            ));
        }
        Ok(TeacherBundle { frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(seed: f64) -> ApxMaps<f32> {
        ApxMaps {
            enc: (0..5)
                .map(|i| Tensor4::from_fn([1, 2, 4 >> i.min(2), 4 >> i.min(2)], |_, c, h, w| {
                    (seed + (c * 16 + h * 4 + w + i) as f64 * 0.01) as f32
                }))
                .collect(),
            dec: (0..4)
                .map(|i| Tensor4::full([1, 2, 2, 2], (seed * 0.5 + i as f64) as f32))
                .collect(),
            disp: (0..4)
                .map(|i| Tensor4::full([1, 1, 4 >> i.min(2), 4 >> i.min(2)], 0.25 + i as f32 * 0.1))
                .collect(),
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = std::env::temp_dir().join("smalldepth-teacher-test");
        let _ = std::fs::remove_dir_all(&dir);
        let bundle = TeacherBundle {
            frames: vec![("f0".into(), maps(0.1)), ("f1".into(), maps(0.2))],
        };
        bundle.save_dir(&dir).unwrap();
        let back = TeacherBundle::<f32>::load_dir(&dir).unwrap();
        assert_eq!(back.frames.len(), 2);
        assert_eq!(back.frames[0].0, "f0");
        assert_eq!(back.frames[0].1.disp[0], bundle.frames[0].1.disp[0]);
        assert_eq!(back.frames[1].1.enc[4], bundle.frames[1].1.enc[4]);
    }

    #[test]
    fn frame_requires_all_disparity_scales() {
        let mut m = maps(0.3);
        m.disp.pop();
        let store = TeacherBundle::frame_to_store(&m).unwrap();
        assert!(TeacherBundle::<f32>::frame_from_store(&store).is_err());
    }
}
