//! Every knob of every command, addressable by dotted key.

use std::path::Path;

use chanfuse::config::{self, KeyValue};
use chanfuse::data::SynthMotionSpec;
use chanfuse::model::ToyNetConfig;
use chanfuse::train::{PolicyConfig, TrainConfig};
use chanfuse::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub data: SynthMotionSpec,
    pub model: ToyNetConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    /// Keys set explicitly, by file or flag.
    pub explicit: Vec<String>,
}

impl RunConfig {
    /// Defaults, then the config file, then `--key value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut rc = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            rc.apply(&config::parse_text(&text)?)?;
        }
        rc.apply(overrides)?;
        Ok(rc)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        config::apply(
            &mut [&mut self.data, &mut self.model, &mut self.train, &mut self.policy],
            pairs,
        )?;
        self.explicit.extend(pairs.iter().map(|(k, _)| k.clone()));
        Ok(())
    }

    /// Records how a dataset was generated, from its manifest when there is one.
    pub fn adopt_manifest(&mut self, dataset: &Path) -> Result<()> {
        let path = chanfuse::data::manifest_path(dataset);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut data = SynthMotionSpec::default();
        config::apply(&mut [&mut data], &config::parse_text(&text)?)?;
        self.data = data;
        Ok(())
    }

    pub fn echo(&self, command: &str) -> String {
        let mut entries = self.data.entries();
        entries.extend(self.model.entries());
        entries.extend(self.train.entries());
        entries.extend(self.policy.entries());
        format!("# chanfuse {command}\n{}", config::render(&entries))
    }

    pub fn write_echo(&self, dir: &Path, command: &str) -> Result<()> {
        let path = dir.join("config.echo");
        std::fs::write(&path, self.echo(command)).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_reads_back() {
        let mut rc = RunConfig::default();
        rc.apply(&[
            ("train.lambda_eff".into(), "0.25".into()),
            ("model.variant".into(), "shift".into()),
            ("data.classes".into(), "up,down".into()),
        ])
        .unwrap();
        let mut back = RunConfig::default();
        back.apply(&config::parse_text(&rc.echo("train")).unwrap()).unwrap();
        assert_eq!(back.train, rc.train);
        assert_eq!(back.model, rc.model);
        assert_eq!(back.data, rc.data);
    }

    #[test]
    fn unknown_keys_fail() {
        let err = RunConfig::default()
            .apply(&[("train.lambda".into(), "1".into())])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
