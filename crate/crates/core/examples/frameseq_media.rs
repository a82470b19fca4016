//! Generates a synthetic clip, packs it as a FrameSeq zip and reads it back.

use std::io::Cursor;

use fmeter::frameseq::{extract_zip, generate, sniff_zip, write_zip, Pattern};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frames = generate(30, Pattern::Gradient, 64, 48);
    let zip = write_zip(&frames, 25.0)?;
    println!("packed {} frames into {} bytes", frames.len(), zip.len());

    let meta = sniff_zip(Cursor::new(&zip))?.expect("a frame sequence");
    println!(
        "meta: {}x{} @ {} fps, {} frames",
        meta.width, meta.height, meta.fps, meta.frame_count
    );

    // anything that is not a zip is treated as an opaque video
    assert!(sniff_zip(Cursor::new(b"\x00\x00\x00\x18ftypmp42"))?.is_none());

    let tmp = tempfile::tempdir()?;
    let zip_path = tmp.path().join("clip.zip");
    std::fs::write(&zip_path, &zip)?;
    let seq = extract_zip(&zip_path, &tmp.path().join("frames"))?;
    for i in [0, 15, 29] {
        println!("frame {i:>2}: mean luma {:.1}", seq.read_frame(i)?.mean_luma());
    }
    Ok(())
}
