use densecap::checkpoint::Checkpoint;
use densecap::dataset::{load_corpus, Vocabulary};
use densecap::evaluation::teacher_forced_accuracy;
fn main() -> densecap::Result<()> {
    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/dc5/run/model.ckpt"))?;
    let model = ckpt.into_model()?;
    let scenes = load_corpus(std::path::Path::new("/tmp/dc5/data/train"))?;
    let text = std::fs::read_to_string("/tmp/dc5/run/vocab.txt")?;
    let vocab = Vocabulary::from_tokens(text.lines().map(|s| s.to_string()).collect());
    println!("tf accuracy: {:.4}", teacher_forced_accuracy(&model, &scenes, &vocab, 0.7)?);
    Ok(())
}
