use std::io::Write;
use std::path::Path;

use caspr_core::{Error, Result};
use tempfile::NamedTempFile;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => 2,
        Error::BadMagic | Error::TruncatedFile => 2,
        Error::SchemaMismatch(_) | Error::InvalidSchema(_) | Error::VersionMismatch { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) => 5,
        _ => 1,
    }
}

/// `error kind=<kind> code=<code> message="<escaped>"`
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    format!("error kind={kind} code={code} message={message:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_error_category() {
        let parse = Error::Parse { row: 3, msg: "x".into() };
        assert_eq!(exit_code(&parse), 2);
        assert_eq!(exit_code(&Error::SchemaMismatch("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 5);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }

    #[test]
    fn error_line_is_one_line_and_quoted() {
        let l = error_line("ParseError", 2, "bad \"value\"\nat row 3");
        assert_eq!(l, r#"error kind=ParseError code=2 message="bad \"value\"\nat row 3""#);
        assert_eq!(l.lines().count(), 1);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
