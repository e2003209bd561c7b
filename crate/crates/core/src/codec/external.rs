//! Optional adapter around a user-supplied codec binary.
//!
//! The encoder command reads a PNG at `{in}` and writes a bitstream at
//! `{out}`; the decoder command reads that bitstream and writes a PNG. Both
//! run through `sh -c`. The adapter is only used at evaluation time.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_png, write_png, PlanarImage};
use crate::proxy::CodecTrace;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalCodecConfig {
    #[serde(default)]
    pub enabled: bool,
    /// e.g. `cjpeg -quality {quality} -outfile {out} {in}`
    pub encode_cmd: String,
    pub decode_cmd: String,
}

fn run(template: &str, input: &Path, output: &Path, extra: &[(&str, String)]) -> Result<()> {
    let mut cmd = template.replace("{in}", &input.display().to_string()).replace("{out}", &output.display().to_string());
    for (key, value) in extra {
        cmd = cmd.replace(&format!("{{{key}}}"), value);
    }
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::External(format!("could not start `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    if !output.exists() {
        return Err(Error::External(format!("`{cmd}` did not write {}", output.display())));
    }
    Ok(())
}

/// Code an 8-bit image through the external tool. `params` fills extra
/// `{name}` placeholders (for instance a quality setting).
pub fn external_codec(img: &PlanarImage, cfg: &ExternalCodecConfig, params: &[(&str, String)]) -> Result<CodecTrace> {
    if !cfg.enabled {
        return Err(Error::External("external codec is disabled".into()));
    }
    let dir = tempfile::tempdir()?;
    let src = dir.path().join("in.png");
    let bits = dir.path().join("coded.bin");
    let dst = dir.path().join("out.png");
    write_png(&img.quantize_to_depth(), &src)?;
    run(&cfg.encode_cmd, &src, &bits, params)?;
    let size = std::fs::metadata(&bits)?.len();
    run(&cfg.decode_cmd, &bits, &dst, params)?;
    let reconstruction = read_png(&dst)?;
    if (reconstruction.h, reconstruction.w) != (img.h, img.w) {
        return Err(Error::External(format!(
            "decoder returned {}x{}, expected {}x{}",
            reconstruction.h, reconstruction.w, img.h, img.w
        )));
    }
    Ok(CodecTrace { reconstruction, proxy_rate_bits: 0.0, actual_bits: Some(8 * size), stepsize: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_tool() -> ExternalCodecConfig {
        ExternalCodecConfig { enabled: true, encode_cmd: "cp {in} {out}".into(), decode_cmd: "cp {in} {out}".into() }
    }

    #[test]
    fn identity_tool_round_trips() {
        let img = PlanarImage::from_fn(9, 11, 3, |y, x, c| ((y * 29 + x * 7 + c * 90) % 256) as f64);
        let trace = external_codec(&img, &copy_tool(), &[]).unwrap();
        assert_eq!(trace.reconstruction, img);
        let mut png = Vec::new();
        crate::image::write_png_to(&img, &mut png).unwrap();
        assert_eq!(trace.actual_bits, Some(8 * png.len() as u64));
    }

    #[test]
    fn failures_are_structured() {
        let img = PlanarImage::filled(4, 4, 1, 3.0);
        assert!(matches!(external_codec(&img, &ExternalCodecConfig::default(), &[]), Err(Error::External(_))));
        let cfg = ExternalCodecConfig { encode_cmd: "exit 3".into(), ..copy_tool() };
        let err = external_codec(&img, &cfg, &[]).unwrap_err().to_string();
        assert!(err.contains("exit"), "{err}");
        let cfg = ExternalCodecConfig { encode_cmd: "definitely-not-a-codec-binary {in} {out}".into(), ..copy_tool() };
        assert!(external_codec(&img, &cfg, &[]).is_err());
    }
}
