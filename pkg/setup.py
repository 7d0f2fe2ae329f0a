import setuptools

setuptools.setup(
    name="tcbmkit",
    version="0.1",
    description="Textual Concept Bottleneck Models built on frozen text embeddings",
    license="MIT",
    packages=setuptools.find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.8",
    install_requires=[
        "click>=7.0",
        "PyYAML>=5.1",
        "requests>=2.23.0",
        "numpy>=1.22",
        "scipy>=1.8",
        "scikit-learn>=1.3",
    ],
    extras_require={
        "dev": ["pytest>=6.0", "mypy", "yapf"],
    },
    entry_points={
        "console_scripts": ["tcbmkit = tcbmkit.cli:root"],
    })
