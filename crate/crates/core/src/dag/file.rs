//! TOML model descriptions.
//!
//! ```toml
//! model_id = "tiny"
//! input_dim = 2
//! input_node = 0
//! output_node = 1
//! edges = [[0, 1]]
//!
//! [[nodes]]
//! index = 0
//! label = "stem"
//! kind = "affine-mod"
//! weights = [[1, 0], [0, 1]]
//! bias = [0, 0]
//!
//! [[nodes]]
//! index = 1
//! kind = "reduce-sum"
//! ```
//!
//! Layer kinds: `affine-mod` (`weights`, `bias`), `elementwise-mix` (`coeffs`,
//! optional `offset`), `concat` (`arity`), `split-take` (`start`, `len`),
//! `reduce-sum`. Optional `[[overrides]]` tables carry `input`/`output` pairs.

use std::path::Path;

use super::{validate_dag, DagError, DagModel};
use crate::crypto::Digest;

/// Parses and validates a model description.
pub fn parse_model(text: &str) -> Result<DagModel, DagError> {
    let model: DagModel = toml::from_str(text).map_err(|e| DagError::File(e.to_string()))?;
    validate_dag(&model)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<DagModel, DagError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DagError::File(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

/// Digest of a model file's raw bytes, same hash as tensor commitments.
pub fn model_file_digest(bytes: &[u8]) -> Digest {
    Digest::of(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{chain, execute, LayerId, LayerSpec, Tensor};

    const TINY: &str = r#"
model_id = "tiny"
input_dim = 2
input_node = 0
output_node = 1
edges = [[0, 1]]

[[nodes]]
index = 0
label = "stem"
kind = "affine-mod"
weights = [[1, 0], [0, 1]]
bias = [0, 0]

[[nodes]]
index = 1
kind = "reduce-sum"
"#;

    #[test]
    fn parses_documented_example() {
        let m = parse_model(TINY).unwrap();
        assert_eq!(m.nodes[1].spec, LayerSpec::ReduceSum);
        assert_eq!(m.label(LayerId(0)), "stem");
        let out = execute(&m, &Tensor::new(vec![3, 4]).unwrap()).unwrap();
        assert_eq!(out.final_output.values(), &[7]);
    }

    #[test]
    fn rejects_invalid_graphs() {
        let cyclic = TINY.replace("edges = [[0, 1]]", "edges = [[0, 1], [1, 0]]");
        assert!(matches!(parse_model(&cyclic), Err(DagError::CycleDetected(_))));
        assert!(matches!(parse_model("model_id = 3"), Err(DagError::File(_))));
    }

    #[test]
    fn serialized_models_round_trip() {
        let m = chain("c", 4, 2, 5);
        let text = toml::to_string(&m).unwrap();
        assert_eq!(parse_model(&text).unwrap(), m);
    }
}
