use std::collections::BTreeMap;
use std::fmt;

use crate::checkpoint::{Checkpoint, CheckpointError, Record};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Module kind of a parameter tensor, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleTag {
    Embedding,
    Attention,
    LayerNorm,
    Mlp,
    Head,
    Router,
}

impl ModuleTag {
    pub const ENCODER: [ModuleTag; 4] = [
        ModuleTag::Embedding,
        ModuleTag::Attention,
        ModuleTag::LayerNorm,
        ModuleTag::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::Embedding => "embedding",
            ModuleTag::Attention => "attention",
            ModuleTag::LayerNorm => "layernorm",
            ModuleTag::Mlp => "mlp",
            ModuleTag::Head => "head",
            ModuleTag::Router => "router",
        }
    }

    /// Derives the tag from a parameter name such as `blocks.03.mlp.w0`.
    pub fn of_name(name: &str) -> Result<Self> {
        let mut parts = name.split('.');
        let tag = match parts.next() {
            Some("embed") => ModuleTag::Embedding,
            Some("final_ln") => ModuleTag::LayerNorm,
            Some("head") => ModuleTag::Head,
            Some("router") => ModuleTag::Router,
            Some("blocks") => match (parts.next(), parts.next()) {
                (Some(_), Some("ln1" | "ln2")) => ModuleTag::LayerNorm,
                (Some(_), Some("att")) => ModuleTag::Attention,
                (Some(_), Some("mlp")) => ModuleTag::Mlp,
                _ => return Err(Error::UnknownTag(name.to_string())),
            },
            _ => return Err(Error::UnknownTag(name.to_string())),
        };
        Ok(tag)
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" | "embed" => Ok(ModuleTag::Embedding),
            "attention" | "att" => Ok(ModuleTag::Attention),
            "layernorm" | "ln" | "layer-norm" => Ok(ModuleTag::LayerNorm),
            "mlp" => Ok(ModuleTag::Mlp),
            "head" => Ok(ModuleTag::Head),
            "router" => Ok(ModuleTag::Router),
            _ => Err(Error::UnknownTag(s.to_string())),
        }
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer:02}")
}

pub fn block_param(layer: usize, local: &str) -> String {
    format!("{}.{local}", block_prefix(layer))
}

/// Block index encoded in a parameter name, if any.
pub fn layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    rest.split('.').next()?.parse().ok()
}

/// Name with the `blocks.NN.` prefix removed (`att.wq`, `mlp.b1`, ...).
pub fn local_name(name: &str) -> &str {
    match name.strip_prefix("blocks.") {
        Some(rest) => rest.split_once('.').map_or(rest, |(_, local)| local),
        None => name,
    }
}

/// Named, module-tagged parameter set of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamTree<T> {
    fn default() -> Self {
        ParamTree {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamTree<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; the name must map to a known module tag.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        ModuleTag::of_name(&name)?;
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Structure {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Tag of a stored name (names are validated on insert).
    pub fn tag(name: &str) -> ModuleTag {
        ModuleTag::of_name(name).expect("names are validated on insert")
    }

    /// Tensors with the given tag, optionally restricted to one block.
    pub fn select(&self, tag: ModuleTag, layer: Option<usize>) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(move |(name, _)| {
            Self::tag(name) == tag && (layer.is_none() || layer_of(name) == layer)
        })
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => {
                    return Err(Error::Structure {
                        name: name.clone(),
                        reason: "missing from second tree".into(),
                    })
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Structure {
                        name: name.clone(),
                        reason: format!("shape {:?} vs {:?}", t.shape(), o.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Structure {
                name: extra.clone(),
                reason: "missing from first tree".into(),
            });
        }
        Ok(())
    }

    /// Elementwise combination of two structurally identical trees.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_structure(other)?;
        let mut out = BTreeMap::new();
        for (name, a) in &self.tensors {
            let b = &other.tensors[name];
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            out.insert(name.clone(), Tensor::new(a.shape().to_vec(), data)?);
        }
        Ok(ParamTree { tensors: out })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ParamTree {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        ParamTree {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.scale(c))).collect(),
        }
    }

    /// `self += alpha · other`, restricted to names accepted by `filter`.
    pub fn axpy_filtered(&mut self, alpha: T, other: &Self, filter: impl Fn(&str) -> bool) -> Result<()> {
        self.check_same_structure(other)?;
        for (name, t) in self.tensors.iter_mut() {
            if filter(name) {
                t.axpy(alpha, &other.tensors[name])?;
            }
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> T {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamTree<U> {
        ParamTree {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        for (name, t) in &self.tensors {
            ck.insert_dense(name.clone(), t.clone());
        }
        ck
    }

    /// Builds a tree from the dense records whose names start with `prefix`
    /// (the prefix is stripped).
    pub fn from_checkpoint(ck: &Checkpoint<T>, prefix: &str) -> Result<Self> {
        let mut tree = ParamTree::new();
        for (name, rec) in &ck.tensors {
            let Some(local) = name.strip_prefix(prefix) else { continue };
            match rec {
                Record::Dense(t) => tree.insert(local, t.clone())?,
                Record::Sparse(_) => {
                    return Err(CheckpointError::Invalid {
                        tensor: name.clone(),
                        reason: "parameter trees hold dense tensors only".into(),
                    }
                    .into())
                }
            }
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_from_names() {
        assert_eq!(ModuleTag::of_name("blocks.03.mlp.w0").unwrap(), ModuleTag::Mlp);
        assert_eq!(ModuleTag::of_name("blocks.10.ln2.gamma").unwrap(), ModuleTag::LayerNorm);
        assert_eq!(ModuleTag::of_name("blocks.00.att.bo").unwrap(), ModuleTag::Attention);
        assert_eq!(ModuleTag::of_name("embed.pos").unwrap(), ModuleTag::Embedding);
        assert_eq!(ModuleTag::of_name("final_ln.beta").unwrap(), ModuleTag::LayerNorm);
        assert!(ModuleTag::of_name("blocks.00.conv.w").is_err());
        assert!(ModuleTag::of_name("mystery").is_err());
        assert_eq!(layer_of("blocks.07.att.wq"), Some(7));
        assert_eq!(layer_of("embed.cls"), None);
        assert_eq!(local_name("blocks.07.att.wq"), "att.wq");
    }

    #[test]
    fn structure_mismatch_names_the_tensor() {
        let mut a = ParamTree::<f32>::new();
        a.insert("embed.cls", Tensor::zeros(&[4])).unwrap();
        a.insert("embed.pos", Tensor::zeros(&[2, 4])).unwrap();
        let mut b = a.clone();
        b.insert("embed.pos", Tensor::zeros(&[3, 4])).unwrap();
        match a.check_same_structure(&b) {
            Err(Error::Structure { name, .. }) => assert_eq!(name, "embed.pos"),
            other => panic!("{other:?}"),
        }
    }
}
