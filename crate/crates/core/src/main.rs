fn main() {
    std::process::exit(lessvit::cli::run(std::env::args_os()));
}
