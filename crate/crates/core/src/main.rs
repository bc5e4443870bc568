fn main() {
    std::process::exit(vrlayout::cli::run(std::env::args_os()));
}
