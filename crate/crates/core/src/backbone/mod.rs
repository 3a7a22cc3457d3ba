//! A small encoder-decoder transformer: trained once on a synthetic corpus,
//! then frozen and steered only through prepended prompt rows.

mod layers;
mod model;
mod params;
mod pretrain;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use model::{argmax, pick, BatchLogits, DecodeSession, Strategy, Trace};
pub use params::{AttnParams, BackboneDims, DecLayer, EncLayer, FfParams, Params};
pub use pretrain::{PretrainConfig, PretrainExample, PretrainLog, Slot};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vocab::{TokenId, Vocabulary};

const FILE_FORMAT: &str = "lplab-backbone/1";

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    dims: BackboneDims,
    vocab: Vocabulary,
    params: Params<T>,
    frozen: bool,
    checksum: Option<String>,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialized, trainable backbone.
    pub fn new(dims: BackboneDims, vocab: Vocabulary, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&dims, vocab.len(), &mut rng);
        Ok(Self { dims, vocab, params, frozen: false, checksum: None })
    }

    pub fn dims(&self) -> &BackboneDims {
        &self.dims
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.dims.d_model
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut Params<T>> {
        if self.frozen {
            return Err(Error::Frozen("parameter mutation"));
        }
        self.checksum = None;
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the parameters immutable and records their digest.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.checksum = Some(self.digest());
    }

    /// Digest recorded at freeze time.
    pub fn recorded_checksum(&self) -> Option<&str> {
        self.checksum.as_deref()
    }

    /// Trainable deep copy, used by the fine-tuning baselines. The original
    /// stays frozen.
    pub fn thawed_copy(&self) -> Self {
        Self { dims: self.dims, vocab: self.vocab.clone(), params: self.params.clone(), frozen: false, checksum: None }
    }

    /// SHA-256 over the dimensions and every parameter value (as
    /// little-endian `f64`) in canonical order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(FILE_FORMAT.as_bytes());
        for v in [
            self.dims.d_model,
            self.dims.n_heads,
            self.dims.d_ff,
            self.dims.n_enc_layers,
            self.dims.n_dec_layers,
            self.vocab.len(),
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for t in self.params.tensors() {
            for &x in t {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn embed_row(&self, id: TokenId) -> &[T] {
        self.params.embed.row(id as usize)
    }

    /// Rows of the embedding table for `ids`.
    pub fn embed_rows(&self, ids: &[TokenId]) -> Matrix<T> {
        let rows: Vec<Vec<T>> = ids.iter().map(|&i| self.embed_row(i).to_vec()).collect();
        if rows.is_empty() {
            Matrix::zeros(0, self.dims.d_model)
        } else {
            Matrix::from_rows(&rows)
        }
    }

    /// Same model in another precision.
    pub fn convert<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            dims: self.dims,
            vocab: self.vocab.clone(),
            params: self.params.convert(&self.dims),
            frozen: self.frozen,
            checksum: self.checksum.clone(),
        }
    }

    pub fn to_file(&self) -> BackboneFile {
        BackboneFile {
            format: FILE_FORMAT.to_string(),
            dims: self.dims,
            vocab: self.vocab.clone(),
            frozen: self.frozen,
            checksum: self.digest(),
            tensors: self.params.tensors().iter().map(|t| t.iter().map(|x| x.as_f64()).collect()).collect(),
        }
    }

    /// Rebuilds a backbone from its file form, verifying the checksum.
    pub fn from_file(file: BackboneFile) -> Result<Self> {
        if file.format != FILE_FORMAT {
            return Err(Error::Format(format!("unsupported backbone format {:?}", file.format)));
        }
        file.dims.validate()?;
        let mut params = Params::<T>::zeros(&file.dims, file.vocab.len());
        {
            let dst = params.tensors_mut();
            if dst.len() != file.tensors.len() {
                return Err(Error::Format(format!("expected {} tensors, found {}", dst.len(), file.tensors.len())));
            }
            for (i, (d, s)) in dst.into_iter().zip(&file.tensors).enumerate() {
                if d.len() != s.len() {
                    return Err(Error::Format(format!("tensor {i}: expected {} values, found {}", d.len(), s.len())));
                }
                for (a, &b) in d.iter_mut().zip(s) {
                    *a = T::of(b);
                }
            }
        }
        let mut bb = Self { dims: file.dims, vocab: file.vocab, params, frozen: false, checksum: None };
        let actual = bb.digest();
        if actual != file.checksum {
            return Err(Error::Checksum { expected: file.checksum, actual });
        }
        if file.frozen {
            bb.freeze();
        }
        Ok(bb)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_file())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: BackboneFile = serde_json::from_str(&text)?;
        Self::from_file(file)
    }
}

/// Self-describing model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneFile {
    pub format: String,
    pub dims: BackboneDims,
    pub vocab: Vocabulary,
    pub frozen: bool,
    pub checksum: String,
    pub tensors: Vec<Vec<f64>>,
}
