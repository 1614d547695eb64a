fn main() {
    eprintln!("echo: command-line interface not wired up yet");
    std::process::exit(2);
}
