//! Renders a few moving-shape clips, writes them as PNG directories with a
//! CSV manifest, and reads the manifest back as a dataset.

use std::fs;
use std::path::PathBuf;

use t2v_inflate::data::manifest::write_clip_pngs;
use t2v_inflate::data::{clips::SyntheticSet, DataConfig, Dataset};

fn main() -> t2v_inflate::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic_clips".into()));
    let set = SyntheticSet::generate(6, 3, 8, 3, 32, 32)?;

    let mut csv = String::from("path,caption\n");
    for (i, clip) in set.clips.iter().enumerate() {
        let dir = root.join(format!("clip_{i:02}"));
        fs::create_dir_all(&dir)?;
        write_clip_pngs(&dir, &clip.frames)?;
        csv.push_str(&format!("clip_{i:02},{}\n", clip.caption));
        println!("{:<28} centers {:?}", clip.caption, clip.centers);
    }
    let manifest = root.join("manifest.csv");
    fs::write(&manifest, csv)?;

    let ds = Dataset::open(&DataConfig::Manifest { path: manifest.clone() }, 8, 3, 32, 32)?;
    let (frames, caption) = ds.get(0)?;
    println!("{} clips from {}; first: {caption:?} {:?}", ds.len(), manifest.display(), frames.dims());
    Ok(())
}
