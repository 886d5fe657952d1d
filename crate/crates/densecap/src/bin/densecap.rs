//! Thin entry point; all command logic lives in `densecap::cli`.

fn main() {
    if let Err(e) = densecap::cli::run(std::env::args_os()) {
        let msg = e.to_string();
        if !msg.is_empty() {
            eprintln!("error: {msg}");
        }
        std::process::exit(e.exit_code());
    }
}
