//! Saves a model, reloads it, and shows the header stored in front of the
//! raw parameter block.

use std::collections::BTreeMap;

use sdd_tta::io::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
use sdd_tta::net::build_architecture;

fn main() -> sdd_tta::Result<()> {
    let params = build_architecture(64, 64, 42)?;
    let meta = CheckpointMeta {
        seed: 42,
        provenance: BTreeMap::from([("note".to_string(), "fresh init".to_string())]),
    };
    let path = std::env::temp_dir().join("init.sddckpt");
    save_checkpoint(&path, &params, &meta)?;

    let bytes = std::fs::read(&path).map_err(|e| sdd_tta::Error::io(&path, e))?;
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    println!("magic {:?}", std::str::from_utf8(&bytes[..8]).unwrap());
    println!("header {}", std::str::from_utf8(&bytes[12..12 + header_len]).unwrap());
    println!("{} bytes of parameters", bytes.len() - 12 - header_len);

    let (back, back_meta) = load_checkpoint(&path)?;
    assert!(back.bit_eq(&params));
    assert_eq!(back_meta, meta);
    let (again, _) = decode_checkpoint(&bytes, &path)?;
    assert_eq!(encode_checkpoint(&again, &meta)?, bytes);
    println!(
        "reloaded {} tensors, re-encoding is byte-identical",
        back.entries().len()
    );
    Ok(())
}
