fn main() {
    std::process::exit(manifool::cli::run(std::env::args_os()));
}
