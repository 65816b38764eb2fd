//! Named trainable parameters grouped by role.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Encoder,
    Guidance,
    Ughr,
    Decoder,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Guidance => "guidance",
            Role::Ughr => "ughr",
            Role::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "encoder" => Ok(Role::Encoder),
            "guidance" => Ok(Role::Guidance),
            "ughr" => Ok(Role::Ughr),
            "decoder" => Ok(Role::Decoder),
            other => Err(Error::Config(format!("unknown parameter role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

/// Index into a [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Weight initialisers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        role: Role,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite standard deviation");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            role,
            value: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set parameter",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every parameter on `tape`; entry `i` is parameter `i`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.value.clone()))
            .collect()
    }

    /// Copies every parameter with a role in `roles` from `other`, matching
    /// by name and shape.
    pub fn copy_roles_from(&mut self, other: &ParamStore, roles: &[Role]) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| roles.contains(&p.role)) {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Config(format!("parameter {} missing from source", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "copy parameters",
                    format!("{}: {:?} vs {:?}", p.name, src.value.shape(), p.value.shape()),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_and_copies_by_role() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.add("enc", Role::Encoder, &[2, 3], Init::Normal(1.0), &mut rng);
        a.add("dec", Role::Decoder, &[4], Init::Zeros, &mut rng);
        assert_eq!(a.count(), 10);
        assert_eq!(a.count_role(Role::Decoder), 4);
        let mut b = a.clone();
        b.values_mut().for_each(|t| t.data_mut().fill(7.0));
        b.copy_roles_from(&a, &[Role::Encoder]).unwrap();
        assert_eq!(b.get(0).value, a.get(0).value);
        assert_eq!(b.get(1).value.data(), &[7.0; 4]);
    }
}
