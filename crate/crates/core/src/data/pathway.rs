use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDef {
    pub name: String,
    pub genes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaboliteDef {
    pub name: String,
    /// modules producing this metabolite
    #[serde(default)]
    pub in_modules: Vec<String>,
    /// modules consuming it
    #[serde(default)]
    pub out_modules: Vec<String>,
}

/// Bipartite module/metabolite factor graph plus the gene sets of each module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwayDef {
    pub genes: Vec<String>,
    pub modules: Vec<ModuleDef>,
    pub metabolites: Vec<MetaboliteDef>,
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(DataError::Pathway(format!("duplicate {what} `{n}`")));
        }
    }
    Ok(())
}

impl PathwayDef {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pathway serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() || self.metabolites.is_empty() {
            return Err(DataError::Pathway("needs at least one module and one metabolite".into()));
        }
        unique("gene", self.genes.iter())?;
        unique("module", self.modules.iter().map(|m| &m.name))?;
        unique("metabolite", self.metabolites.iter().map(|m| &m.name))?;
        let genes: HashSet<&String> = self.genes.iter().collect();
        for m in &self.modules {
            if m.genes.is_empty() {
                return Err(DataError::Pathway(format!("module `{}` has no genes", m.name)));
            }
            unique("gene in module", m.genes.iter())?;
            if let Some(g) = m.genes.iter().find(|g| !genes.contains(g)) {
                return Err(DataError::Pathway(format!(
                    "module `{}` uses gene `{g}` missing from the gene list",
                    m.name
                )));
            }
        }
        let modules: HashSet<&String> = self.modules.iter().map(|m| &m.name).collect();
        for c in &self.metabolites {
            if c.in_modules.is_empty() && c.out_modules.is_empty() {
                return Err(DataError::Pathway(format!("metabolite `{}` has no producer or consumer", c.name)));
            }
            unique("producer", c.in_modules.iter())?;
            unique("consumer", c.out_modules.iter())?;
            for m in c.in_modules.iter().chain(&c.out_modules) {
                if !modules.contains(m) {
                    return Err(DataError::Pathway(format!("metabolite `{}` names unknown module `{m}`", c.name)));
                }
            }
            if let Some(m) = c.in_modules.iter().find(|m| c.out_modules.contains(m)) {
                return Err(DataError::Pathway(format!(
                    "module `{m}` both produces and consumes `{}`",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn n_metabolites(&self) -> usize {
        self.metabolites.len()
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.name == name)
    }

    /// `S[m][k]`: +1 if module `m` produces metabolite `k`, −1 if it consumes it.
    pub fn stoichiometry(&self) -> Vec<Vec<f64>> {
        let mut s = vec![vec![0.0; self.n_metabolites()]; self.n_modules()];
        for (k, c) in self.metabolites.iter().enumerate() {
            for m in &c.in_modules {
                s[self.module_index(m).expect("validated")][k] = 1.0;
            }
            for m in &c.out_modules {
                s[self.module_index(m).expect("validated")][k] = -1.0;
            }
        }
        s
    }

    /// Column indices (into `features`) of each module's genes.
    pub fn module_columns(&self, features: &[String]) -> Result<Vec<Vec<usize>>> {
        let idx: HashMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
        self.modules
            .iter()
            .map(|m| {
                m.genes
                    .iter()
                    .map(|g| {
                        idx.get(g.as_str()).copied().ok_or_else(|| {
                            DataError::Pathway(format!("gene `{g}` of module `{}` is not a dataset feature", m.name))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}
