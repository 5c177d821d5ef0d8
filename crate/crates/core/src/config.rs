//! Run configuration: one `key = value` file with `[net]`, `[train]` and
//! `[data]` sections, overridden by command-line flags.
//!
//! ```text
//! # comments start with '#'
//! [net]
//! sftl = digt
//! channels = 16,32,64,64
//! [train]
//! epochs = 10
//! [data]
//! n = 64
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::sphere::{EquirectGrid, PinholeFov};
use crate::train::TrainConfig;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Sensor field of view in degrees.
    pub hfov: f64,
    pub vfov: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 64, h: 64, w: 128, hfov: 70.0, vfov: 60.0, seed: 0 }
    }
}

impl DataConfig {
    pub fn grid(&self) -> Result<EquirectGrid> {
        if self.w != 2 * self.h {
            return Err(Error::Config(format!("panorama width must be twice the height, got {}x{}", self.h, self.w)));
        }
        EquirectGrid::new(self.h, self.w).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fov(&self) -> Result<PinholeFov> {
        PinholeFov::from_degrees(self.hfov, self.vfov).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value '{value}' for data.{key}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "n" => self.n = int(value)?,
            "h" => self.h = int(value)?,
            "w" => self.w = int(value)?,
            "hfov" => self.hfov = real(value)?,
            "vfov" => self.vfov = real(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown key data.{key}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "n = {}\nh = {}\nw = {}\nhfov = {:?}\nvfov = {:?}\nseed = {}\n",
            self.n, self.h, self.w, self.hfov, self.vfov, self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Net,
    Train,
    Data,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "net" => Some(Section::Net),
            "train" => Some(Section::Train),
            "data" => Some(Section::Data),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Section::Net => "net",
            Section::Train => "train",
            Section::Data => "data",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    explicit: BTreeSet<(Section, String)>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", path.display(), no + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(Section::parse(name.trim()).ok_or_else(|| at(format!("unknown section [{name}]")))?);
                continue;
            }
            let s = section.ok_or_else(|| at("key outside a [net], [train] or [data] section".into()))?;
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
            cfg.set(s, k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, section: Section, key: &str, value: &str) -> Result<()> {
        match section {
            Section::Net => self.net.set(key, value)?,
            Section::Train => self.train.set(key, value)?,
            Section::Data => self.data.set(key, value)?,
        }
        self.explicit.insert((section, key.to_string()));
        Ok(())
    }

    /// Whether the file or a flag assigned this key.
    pub fn is_set(&self, section: Section, key: &str) -> bool {
        self.explicit.contains(&(section, key.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    /// The fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (s, body) in [
            (Section::Net, self.net.to_text()),
            (Section::Train, self.train.to_text()),
            (Section::Data, self.data.to_text()),
        ] {
            out.push_str(&format!("[{}]\n{body}", s.name()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cspn::CspnVariant;
    use crate::layers::SftlMode;

    fn parse(t: &str) -> Result<RunConfig> {
        RunConfig::parse(t, Path::new("run.cfg"))
    }

    #[test]
    fn sections_and_comments() {
        let c = parse("# top\n[net]\nsftl = igt # inline\ncspn = off\n\n[train]\nepochs = 3\n[data]\nn = 9\n").unwrap();
        assert_eq!(c.net.sftl, SftlMode::Igt);
        assert_eq!(c.net.cspn, None);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.data.n, 9);
        assert!(c.is_set(Section::Net, "sftl") && !c.is_set(Section::Net, "h"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = parse("[net]\ncspn = ig\n[train]\nlr = 0.001\n").unwrap();
        c.set(Section::Train, "seed", "7").unwrap();
        let back = parse(&c.to_text()).unwrap();
        assert_eq!((&back.net, &back.train, &back.data), (&c.net, &c.train, &c.data));
        assert_eq!(back.net.cspn, Some(CspnVariant::Ig));
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let e = parse("[net]\nsftl = digt\nwidth = 3\n").unwrap_err().to_string();
        assert!(e.contains("run.cfg:3") && e.contains("net.width"), "{e}");
        assert!(parse("[model]\n").is_err());
        assert!(parse("epochs = 3\n").is_err());
        assert!(parse("[train]\nepochs\n").is_err());
        assert!(parse("[net]\nsftl = bogus\n").is_err());
        assert_eq!(parse("[net]\nsftl = bogus\n").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn data_grid_requires_two_to_one() {
        let mut d = DataConfig::default();
        d.w = 100;
        assert_eq!(d.grid().unwrap_err().exit_code(), 2);
    }
}
