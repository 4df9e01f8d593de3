//! Provenance headers stamped into every output file.
//!
//! Headers are `#`-prefixed comment lines carrying the tool version, a hash
//! of the effective configuration, and the seed. They contain no timestamps
//! so that identical runs produce byte-identical outputs.

/// Render the standard header block (no trailing newline).
pub fn header(tool_version: &str, config_hash: &str, seed: u64) -> String {
    format!(
        "# co2hm {tool_version}\n# config-hash: {config_hash}\n# seed: {seed}"
    )
}

#[cfg(test)]
mod tests {
    #[test]
    fn header_is_stable() {
        let h = super::header("0.1.0", "abc123", 7);
        assert_eq!(h, "# co2hm 0.1.0\n# config-hash: abc123\n# seed: 7");
    }
}
