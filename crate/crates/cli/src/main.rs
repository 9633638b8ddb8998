fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(decsc_cli::run(&args));
}
