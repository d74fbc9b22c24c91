import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="pyretalk",
    version="0.1.0",
    description="Audio-driven lip editing of talking-head videos",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="MIT",
    packages=setuptools.find_packages(include=['pyretalk']),
    package_data={"pyretalk": ["templates/*.json"]},
    python_requires=">=3.10",
    install_requires=[
        "torch>=2.0",
        "numpy",
        "scipy",
        "librosa",
        "opencv-python-headless",
        "moviepy<2",
        "soundfile",
        "voluptuous",
        "tomli; python_version < '3.11'",
    ],
    extras_require={
        "test": ["pytest", "pytest-mock", "pytest-asyncio"],
        "vgg": ["torchvision"],
    },
    entry_points={
        "console_scripts": ["retalk=pyretalk.cli:main"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
