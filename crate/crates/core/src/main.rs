fn main() {
    std::process::exit(sense::cli::run(std::env::args_os()));
}
