//! Binary model archive holding everything inference needs: magic bytes
//! `VISL`, a little-endian u32 format version, a little-endian u64 manifest
//! length, a JSON manifest (hyperparameters, group spec, tensor shapes,
//! provenance), then the named tensors as little-endian f64 payloads in
//! manifest order.
//!
//! The manifest deliberately carries no wall-clock timestamps: archives
//! from identical runs must be bit-identical.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use visl_core::graph::GraphPosterior;
use visl_core::model::{GroupSpec, ModelParams};
use visl_core::tensor::streams;
use visl_core::{Error, Result, Rng};

pub const MAGIC: [u8; 4] = *b"VISL";
pub const FORMAT_VERSION: u32 = 1;

/// Name of the tensor holding the edge-posterior logits.
const GRAPH_LOGITS: &str = "graph.logits";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hyper {
    pub latent_dim: usize,
    pub t_steps: usize,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub prior_prob: f64,
    pub backward_enabled: bool,
    pub log_std_bounds: (f64, f64),
}

/// Where the model came from.  Free-form but timestamp-free.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub data_path: String,
    pub n_rows: usize,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub hyper: Hyper,
    pub spec: GroupSpec,
    pub variable_names: Vec<String>,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
}

/// A fully reconstructed model.
pub struct LoadedModel {
    pub params: ModelParams,
    pub graph: GraphPosterior,
    pub spec: GroupSpec,
    pub variable_names: Vec<String>,
    pub provenance: Provenance,
}

pub fn save_model(
    path: &Path,
    params: &ModelParams,
    graph: &GraphPosterior,
    spec: &GroupSpec,
    variable_names: &[String],
    provenance: Provenance,
) -> Result<()> {
    let m = spec.num_groups();
    if graph.num_nodes() != m {
        return Err(Error::Contract(format!(
            "graph has {} nodes but the spec defines {m} groups",
            graph.num_nodes()
        )));
    }
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = params
        .parameters()
        .into_iter()
        .map(|(name, t)| {
            let shape = t.shape().to_vec();
            let data = t.data().clone();
            (name, shape, data)
        })
        .collect();
    tensors.push((GRAPH_LOGITS.to_string(), vec![m, m], graph.logits().data().clone()));

    let manifest = Manifest {
        hyper: Hyper {
            latent_dim: params.latent_dim(),
            t_steps: params.t_steps(),
            sigma_z: params.sigma_z(),
            sigma_x: params.sigma_x(),
            prior_prob: graph.prior_prob(),
            backward_enabled: params.backward_enabled(),
            log_std_bounds: params.log_std_bounds(),
        },
        spec: spec.clone(),
        variable_names: variable_names.to_vec(),
        provenance,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest not serializable: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    for (_, _, data) in &tensors {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path)?;
    let name = path.display();
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "{name}: truncated archive ({} bytes; a header needs 16)",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{name}: bad magic {:02x?} at offset 0 (expected \"VISL\")",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{name}: unsupported format version {version} at offset 4 (this build reads {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if header_len.checked_add(16).map_or(true, |end| end > bytes.len()) {
        return Err(Error::Format(format!(
            "{name}: manifest length {header_len} at offset 8 overruns the {}-byte file",
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Format(format!("{name}: bad manifest at offset 16: {e}")))?;

    let payload = &bytes[16 + header_len..];
    let expected: usize = manifest.tensors.iter().map(|t| 8 * t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{name}: payload at offset {} holds {} bytes, the manifest requires {expected}",
            16 + header_len,
            payload.len()
        )));
    }

    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    let mut offset = 0;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for k in 0..numel {
            let at = offset + 8 * k;
            data.push(f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes")));
        }
        offset += 8 * numel;
        if values.insert(entry.name.clone(), data).is_some() {
            return Err(Error::Format(format!(
                "{name}: duplicate tensor '{}' in the manifest",
                entry.name
            )));
        }
    }

    let spec = manifest.spec;
    let hyper = manifest.hyper;
    // fresh shapes, then overwrite every value from the payload
    let mut rng = Rng::new(0, streams::INIT);
    let mut params = ModelParams::new(
        &spec,
        hyper.latent_dim,
        hyper.t_steps,
        hyper.sigma_z,
        hyper.sigma_x,
        &mut rng,
    )?;
    params.set_log_std_bounds(hyper.log_std_bounds.0, hyper.log_std_bounds.1);
    if hyper.backward_enabled {
        params.enable_backward(&mut rng);
    }
    let logits = values.remove(GRAPH_LOGITS).ok_or_else(|| {
        Error::Format(format!("{name}: archive is missing the {GRAPH_LOGITS} tensor"))
    })?;
    params
        .load_parameter_values(&values)
        .map_err(|e| Error::Format(format!("{name}: {e}")))?;
    let graph = GraphPosterior::from_logits(spec.num_groups(), logits, hyper.prior_prob)?;

    Ok(LoadedModel {
        params,
        graph,
        spec,
        variable_names: manifest.variable_names,
        provenance: manifest.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use visl_core::model::VarKind;

    fn toy_model() -> (ModelParams, GraphPosterior, GroupSpec, Vec<String>) {
        let spec = GroupSpec::new(
            vec![vec![0, 2], vec![1]],
            vec!["left".into(), "right".into()],
            vec![VarKind::Continuous, VarKind::Binary, VarKind::Continuous],
        )
        .unwrap();
        let mut rng = Rng::new(11, streams::INIT);
        let mut params = ModelParams::new(&spec, 4, 2, 1.0, 0.2, &mut rng).unwrap();
        params.enable_backward(&mut rng);
        let graph =
            GraphPosterior::from_logits(2, vec![0.3, -1.2, 2.5, 0.0], 0.05).unwrap();
        let names = vec!["x0".to_string(), "x1".to_string(), "x2".to_string()];
        (params, graph, spec, names)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.visl");
        let (params, graph, spec, names) = toy_model();
        let prov = Provenance { data_path: "train.csv".into(), n_rows: 7, seed: 11, epochs: 3 };
        save_model(&path, &params, &graph, &spec, &names, prov.clone()).unwrap();

        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.variable_names, names);
        assert_eq!(loaded.provenance, prov);
        assert_eq!(loaded.graph.prior_prob(), 0.05);
        assert_eq!(*loaded.graph.logits().data(), vec![0.3, -1.2, 2.5, 0.0]);
        let before = params.parameters();
        let after = loaded.params.parameters();
        assert_eq!(before.len(), after.len());
        for ((n0, t0), (n1, t1)) in before.iter().zip(after.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(*t0.data(), *t1.data(), "tensor {n0} changed across the round trip");
        }

        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.path().join("model2.visl");
        save_model(&path2, &loaded.params, &loaded.graph, &loaded.spec, &loaded.variable_names, loaded.provenance)
            .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.visl");
        let (params, graph, spec, names) = toy_model();
        save_model(&path, &params, &graph, &spec, &names, Provenance::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("version 99") && msg.contains("offset 4"), "{msg}")
            }
            other => panic!("expected a format error, got {:?}", other.err()),
        }
    }

    #[test]
    fn corruption_errors_name_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.visl");
        let (params, graph, spec, names) = toy_model();
        save_model(&path, &params, &graph, &spec, &names, Provenance::default()).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("offset 0"), "{msg}"),
            other => panic!("{:?}", other.err()),
        }

        // manifest length overrunning the file
        let mut bytes = good.clone();
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("offset 8"), "{msg}"),
            other => panic!("{:?}", other.err()),
        }

        // truncated payload
        let mut bytes = good.clone();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("payload"), "{msg}"),
            other => panic!("{:?}", other.err()),
        }

        // empty file
        std::fs::write(&path, []).unwrap();
        match load_model(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("{:?}", other.err()),
        }
    }
}
