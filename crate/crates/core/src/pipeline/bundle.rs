//! Parameter sets for every model role, loaded from or saved to a directory.

use std::path::{Path, PathBuf};

use super::config::{PipelineConfig, TokenScoring};
use crate::error::{Error, Result};
use crate::llm::LLM_ROLE;
use crate::nn::{seeded_init, ParamSet};
use crate::patchsel::{selector_init, PATCHSEL_ROLE};
use crate::specdec::{draft_init, DRAFT_ROLE};
use crate::toksel::{toksel_init, TOKSEL_ROLE};
use crate::vision::{encoder::VIT_ROLE, vision_init};

pub const ROLES: [&str; 5] = [VIT_ROLE, LLM_ROLE, PATCHSEL_ROLE, TOKSEL_ROLE, DRAFT_ROLE];

/// `vit.` -> `<dir>/vit.lvlm`
pub fn param_path(dir: &Path, role: &str) -> PathBuf {
    dir.join(format!("{}.lvlm", role.trim_end_matches('.')))
}

#[derive(Debug, Clone, Default)]
pub struct ModelBundle {
    pub vit: Option<ParamSet>,
    pub llm: Option<ParamSet>,
    pub patchsel: Option<ParamSet>,
    pub toksel: Option<ParamSet>,
    pub draft: Option<ParamSet>,
}

impl ModelBundle {
    /// Seeded parameters for every role.
    pub fn init(config: &PipelineConfig) -> Result<Self> {
        let llm = seeded_init(&config.llm, LLM_ROLE)?;
        Ok(Self {
            vit: Some(vision_init(&config.vit)?),
            toksel: Some(toksel_init(&llm, LLM_ROLE, config.seed)?),
            llm: Some(llm),
            patchsel: Some(selector_init(&config.selector)?),
            draft: Some(draft_init(config.llm.d_model, config.draft_d_ff, config.seed)),
        })
    }

    pub fn slot(&self, role: &str) -> &Option<ParamSet> {
        match role {
            VIT_ROLE => &self.vit,
            LLM_ROLE => &self.llm,
            PATCHSEL_ROLE => &self.patchsel,
            TOKSEL_ROLE => &self.toksel,
            DRAFT_ROLE => &self.draft,
            _ => panic!("unknown role {role}"),
        }
    }

    pub fn slot_mut(&mut self, role: &str) -> &mut Option<ParamSet> {
        match role {
            VIT_ROLE => &mut self.vit,
            LLM_ROLE => &mut self.llm,
            PATCHSEL_ROLE => &mut self.patchsel,
            TOKSEL_ROLE => &mut self.toksel,
            DRAFT_ROLE => &mut self.draft,
            _ => panic!("unknown role {role}"),
        }
    }

    /// Loads every role file present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut b = Self::default();
        for role in ROLES {
            let path = param_path(dir, role);
            if path.exists() {
                *b.slot_mut(role) = Some(ParamSet::load(&path)?);
            }
        }
        Ok(b)
    }

    /// Writes every present role to `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for role in ROLES {
            if let Some(p) = self.slot(role) {
                p.save(&param_path(dir, role))?;
            }
        }
        Ok(())
    }

    /// Fills absent roles with seeded parameters.
    pub fn fill_missing(&mut self, config: &PipelineConfig) -> Result<()> {
        let init = Self::init(config)?;
        for role in ROLES {
            if self.slot(role).is_none() {
                let p = if role == TOKSEL_ROLE {
                    let llm = self.llm.as_ref().expect("llm filled first");
                    toksel_init(llm, LLM_ROLE, config.seed)?
                } else {
                    init.slot(role).clone().expect("init fills every role")
                };
                *self.slot_mut(role) = Some(p);
            }
        }
        Ok(())
    }

    /// Fails with the first role `config` needs that is absent.
    pub fn check_required(&self, config: &PipelineConfig, dir: &Path) -> Result<()> {
        for role in required_roles(config) {
            if self.slot(role).is_none() {
                return Err(Error::MissingParamFile { role: role.to_string(), path: param_path(dir, role) });
            }
        }
        Ok(())
    }
}

/// Roles a configuration runs.
pub fn required_roles(config: &PipelineConfig) -> Vec<&'static str> {
    let v = config.variant;
    let mut roles = vec![VIT_ROLE, LLM_ROLE];
    if v.selects_patches() {
        roles.push(PATCHSEL_ROLE);
    }
    if v.prunes() && config.token_scoring == TokenScoring::Head && config.effective_keep_ratio() < 1.0 {
        roles.push(TOKSEL_ROLE);
    }
    if v.speculative() {
        roles.push(DRAFT_ROLE);
    }
    roles
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Variant;

    #[test]
    fn save_load_and_missing_roles() {
        let c = PipelineConfig::tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut b = ModelBundle::init(&c).unwrap();
        b.draft = None;
        b.save_dir(dir.path()).unwrap();
        let loaded = ModelBundle::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.llm.as_ref().unwrap().checksum(), b.llm.as_ref().unwrap().checksum());
        loaded.check_required(&c.with_variant(Variant::Baseline), dir.path()).unwrap();
        match loaded.check_required(&c, dir.path()) {
            Err(Error::MissingParamFile { role, .. }) => assert_eq!(role, "draft."),
            other => panic!("{other:?}"),
        }
        let mut filled = loaded.clone();
        filled.fill_missing(&c).unwrap();
        filled.check_required(&c, dir.path()).unwrap();
    }
}
